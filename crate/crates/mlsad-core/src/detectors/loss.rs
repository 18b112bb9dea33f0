//! Three-pair contrastive objective: the normal pair is pushed to score 0,
//! the position- and structure-anomaly pairs to score 1, patchwise.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::patchgan::losses::LOG_EPS;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

fn safe_ln_d(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0 / x
    } else {
        0.0
    }
}

/// The three mean-log terms of the loss, before weighting:
/// `(-mean log(1 - a_normal), -mean log a_position, -mean log a_structure)`.
pub fn contrastive_terms(
    a_normal: &Array4<f64>,
    a_position: &Array4<f64>,
    a_structure: &Array4<f64>,
) -> Result<(f64, f64, f64)> {
    if a_normal.dim() != a_position.dim() || a_normal.dim() != a_structure.dim() {
        return Err(Error::invalid(format!(
            "score map shapes differ: {:?} / {:?} / {:?}",
            a_normal.dim(),
            a_position.dim(),
            a_structure.dim()
        )));
    }
    let n = a_normal.len() as f64;
    let t_n = -a_normal.iter().map(|&a| safe_ln(1.0 - a)).sum::<f64>() / n;
    let t_p = -a_position.iter().map(|&a| safe_ln(a)).sum::<f64>() / n;
    let t_s = -a_structure.iter().map(|&a| safe_ln(a)).sum::<f64>() / n;
    Ok((t_n, t_p, t_s))
}

/// `L = -mean[log(1 - a_n) + alpha1 log a_p + alpha2 log a_s]` over all
/// patches and batch entries.
pub fn contrastive_loss(
    a_normal: &Array4<f64>,
    a_position: &Array4<f64>,
    a_structure: &Array4<f64>,
    alpha1: f64,
    alpha2: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha1) || !(0.0..=1.0).contains(&alpha2) {
        return Err(Error::invalid(format!(
            "alpha weights must lie in [0, 1], got ({alpha1}, {alpha2})"
        )));
    }
    let (t_n, t_p, t_s) = contrastive_terms(a_normal, a_position, a_structure)?;
    Ok(t_n + alpha1 * t_p + alpha2 * t_s)
}

/// Gradients of [`contrastive_loss`] w.r.t. the three score maps.
pub fn contrastive_loss_grads(
    a_normal: &Array4<f64>,
    a_position: &Array4<f64>,
    a_structure: &Array4<f64>,
    alpha1: f64,
    alpha2: f64,
) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
    let n = a_normal.len() as f64;
    let g_n = a_normal.mapv(|a| safe_ln_d(1.0 - a) / n);
    let g_p = a_position.mapv(|a| -alpha1 * safe_ln_d(a) / n);
    let g_s = a_structure.mapv(|a| -alpha2 * safe_ln_d(a) / n);
    (g_n, g_p, g_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn m(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 2, 2), v)
    }

    fn single(v: f64) -> Array4<f64> {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn all_half_scores_sum_to_two_ln_two() {
        let l = contrastive_loss(&m(0.5), &m(0.5), &m(0.5), 0.6, 0.4).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_detector_loss_near_zero() {
        let l = contrastive_loss(&m(0.0), &m(1.0), &m(1.0), 0.6, 0.4).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn single_patch_example() {
        let l = contrastive_loss(&single(0.2), &single(0.7), &single(0.9), 1.0, 1.0).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln() + 0.9f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.6851).abs() < 1e-4);
    }

    #[test]
    fn alpha1_zero_equals_two_pair_loss_exactly() {
        let a_n = Array4::from_shape_fn((2, 1, 3, 3), |(b, _, i, j)| {
            0.1 + 0.08 * (b + i + j) as f64
        });
        let a_p = a_n.mapv(|v| 1.0 - v * 0.5);
        let a_s = a_n.mapv(|v| 0.9 - v * 0.3);
        let full = contrastive_loss(&a_n, &a_p, &a_s, 0.0, 0.4).unwrap();
        let (t_n, _t_p, t_s) = contrastive_terms(&a_n, &a_p, &a_s).unwrap();
        let two_pair = t_n + 0.4 * t_s;
        assert_eq!(full.to_bits(), two_pair.to_bits());
    }

    #[test]
    fn alpha_out_of_range_rejected() {
        assert!(contrastive_loss(&m(0.5), &m(0.5), &m(0.5), 1.2, 0.4).is_err());
        assert!(contrastive_loss(&m(0.5), &m(0.5), &m(0.5), 0.4, -0.1).is_err());
    }

    #[test]
    fn partial_signs_match_monotonicity() {
        // raising a normal score raises the loss; raising an anomalous score
        // lowers it
        let (g_n, g_p, g_s) =
            contrastive_loss_grads(&m(0.3), &m(0.6), &m(0.7), 0.6, 0.4);
        assert!(g_n.iter().all(|&g| g > 0.0));
        assert!(g_p.iter().all(|&g| g < 0.0));
        assert!(g_s.iter().all(|&g| g < 0.0));
    }
}

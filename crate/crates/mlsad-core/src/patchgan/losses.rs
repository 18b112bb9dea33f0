//! Adversarial and mutual-information objectives as pure functions of
//! network outputs, with analytic gradients. Training and the
//! finite-difference checks both go through these.

use ndarray::Array4;

use crate::error::{Error, Result};

/// Log arguments are clamped here to keep every loss finite.
pub const LOG_EPS: f64 = 1e-12;

fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

/// Derivative of `ln(max(x, eps))`.
fn safe_ln_d(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0 / x
    } else {
        0.0
    }
}

/// Discriminator loss, averaged over all patches and batch entries:
/// `-[mean log D(real) + mean log (1 - D(fake))]`.
pub fn disc_loss(d_real: &Array4<f64>, d_fake: &Array4<f64>) -> Result<f64> {
    if d_real.dim() != d_fake.dim() {
        return Err(Error::invalid(format!(
            "score map shapes differ: {:?} vs {:?}",
            d_real.dim(),
            d_fake.dim()
        )));
    }
    let n = d_real.len() as f64;
    let real: f64 = d_real.iter().map(|&d| safe_ln(d)).sum();
    let fake: f64 = d_fake.iter().map(|&d| safe_ln(1.0 - d)).sum();
    Ok(-(real + fake) / n)
}

/// Gradients of [`disc_loss`] w.r.t. the two score maps.
pub fn disc_loss_grads(d_real: &Array4<f64>, d_fake: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let n = d_real.len() as f64;
    let g_real = d_real.mapv(|d| -safe_ln_d(d) / n);
    let g_fake = d_fake.mapv(|d| safe_ln_d(1.0 - d) / n);
    (g_real, g_fake)
}

/// Non-saturating generator adversarial loss: `-mean log D(fake)`.
pub fn gen_adv_loss(d_fake: &Array4<f64>) -> f64 {
    let n = d_fake.len() as f64;
    -d_fake.iter().map(|&d| safe_ln(d)).sum::<f64>() / n
}

pub fn gen_adv_loss_grad(d_fake: &Array4<f64>) -> Array4<f64> {
    let n = d_fake.len() as f64;
    d_fake.mapv(|d| -safe_ln_d(d) / n)
}

/// Donsker-Varadhan style lower bound on mutual information from statistics
/// network outputs: `mean(t_joint) - log mean(exp(t_product))`, with the
/// log-mean-exp computed stably.
pub fn mi_lower_bound(t_joint: &[f64], t_product: &[f64]) -> Result<f64> {
    if t_joint.len() < 2 || t_product.len() < 2 {
        return Err(Error::invalid(
            "mutual-information estimate needs at least two samples per batch",
        ));
    }
    let joint = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    Ok(joint - log_mean_exp(t_product))
}

pub fn log_mean_exp(t: &[f64]) -> f64 {
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = t.iter().map(|&v| (v - m).exp()).sum();
    m + (s / t.len() as f64).ln()
}

/// Gradients of [`mi_lower_bound`] w.r.t. the two output vectors.
pub fn mi_lower_bound_grads(t_joint: &[f64], t_product: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = t_joint.len() as f64;
    let g_joint = vec![1.0 / n; t_joint.len()];
    let m = t_product.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t_product.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let g_product = exps.iter().map(|e| -e / z).collect();
    (g_joint, g_product)
}

/// Entropy-term gradient clip: scale the mutual-information gradient so it
/// never overwhelms the adversarial gradient.
pub fn beta_schedule(grad_adv_norm: f64, grad_mi_norm: f64) -> f64 {
    (grad_adv_norm / (grad_mi_norm + 1e-8)).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn map_of(vals: &[f64]) -> Array4<f64> {
        Array4::from_shape_vec((1, 1, 1, vals.len()), vals.to_vec()).unwrap()
    }

    #[test]
    fn disc_loss_at_half_is_two_ln_two() {
        let half = Array4::from_elem((2, 1, 3, 3), 0.5);
        let l = disc_loss(&half, &half).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_perfect_discriminator_is_near_zero() {
        let real = Array4::from_elem((1, 1, 2, 2), 1.0);
        let fake = Array4::from_elem((1, 1, 2, 2), 0.0);
        let l = disc_loss(&real, &fake).unwrap();
        assert!(l.abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn disc_loss_single_patch_example() {
        let l = disc_loss(&map_of(&[0.8]), &map_of(&[0.3])).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn disc_loss_shape_mismatch_rejected() {
        assert!(disc_loss(&map_of(&[0.5]), &map_of(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn gen_loss_examples() {
        let l = gen_adv_loss(&Array4::from_elem((3, 1, 4, 4), 0.5));
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l1 = gen_adv_loss(&Array4::from_elem((1, 1, 1, 1), 1.0));
        assert!(l1.abs() < 1e-12);
        let l4 = gen_adv_loss(&map_of(&[0.25]));
        assert!((l4 - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mi_zero_statistic_gives_zero() {
        let i = mi_lower_bound(&[0.0; 8], &[0.0; 8]).unwrap();
        assert!(i.abs() < 1e-12);
    }

    #[test]
    fn mi_constant_statistic_gives_zero() {
        let i = mi_lower_bound(&[3.7; 5], &[3.7; 5]).unwrap();
        assert!(i.abs() < 1e-12);
    }

    #[test]
    fn mi_one_bit_identity_statistic_matches_closed_form() {
        // T = t on matched pairs, 0 otherwise; product batch is half matched.
        let t = std::f64::consts::LN_2;
        let joint = vec![t; 10];
        let mut product = vec![t; 5];
        product.extend(vec![0.0; 5]);
        let i = mi_lower_bound(&joint, &product).unwrap();
        let expect = t - ((t.exp() + 1.0) / 2.0).ln(); // = ln(4/3)
        assert!((i - expect).abs() < 1e-12);
        assert!((i - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(i < std::f64::consts::LN_2); // below the true MI
    }

    #[test]
    fn mi_invariant_to_constant_shift() {
        let joint = [0.3, -0.2, 0.8, 0.1];
        let product = [0.5, -0.4, 0.2, 0.0];
        let base = mi_lower_bound(&joint, &product).unwrap();
        let k = 17.3;
        let j2: Vec<f64> = joint.iter().map(|v| v + k).collect();
        let p2: Vec<f64> = product.iter().map(|v| v + k).collect();
        let shifted = mi_lower_bound(&j2, &p2).unwrap();
        assert!((base - shifted).abs() < 1e-6);
    }

    #[test]
    fn mi_needs_two_samples() {
        assert!(mi_lower_bound(&[0.1], &[0.2]).is_err());
    }

    #[test]
    fn beta_forced_examples() {
        assert!((beta_schedule(1.0, 4.0) - 1.0 / (4.0 + 1e-8)).abs() == 0.0);
        assert!((beta_schedule(1.0, 4.0) - 0.25).abs() < 1e-8);
        assert_eq!(beta_schedule(5.0, 1.0), 1.0);
        assert_eq!(beta_schedule(0.0, 0.0), 0.0);
    }

    #[test]
    fn beta_in_unit_interval_and_clips() {
        for i in 0..100 {
            let a = i as f64 * 0.37;
            let b = (100 - i) as f64 * 0.11;
            let beta = beta_schedule(a, b);
            assert!((0.0..=1.0).contains(&beta));
            if a >= b {
                assert_eq!(beta, (a / (b + 1e-8)).min(1.0));
            }
        }
    }
}

//! Robustness probe: gradient descent in image space looking for inputs the
//! model scores as normal, with a pull-away regularizer keeping the searched
//! batch diverse. Success means scoring below the chosen percentile of the
//! stored normal test scores.

use ndarray::Array4;

use crate::aggregation::{score_gradient, PoolingMode};
use crate::detectors::DetectorBank;
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Search hyperparameters. Reference values: lambda 1e-5, Adam at lr 0.02
/// with betas (0.5, 0.9), the 95th percentile threshold, 2000 steps, and
/// clipping to the image range after every update.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub percentile: f64,
    pub max_steps: usize,
    pub clip: (f64, f64),
    pub pooling: PoolingMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-5,
            lr: 0.02,
            beta1: 0.5,
            beta2: 0.9,
            percentile: 95.0,
            max_steps: 2000,
            clip: (-1.0, 1.0),
            pooling: PoolingMode::Average,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if !(0.0 < self.percentile && self.percentile < 100.0) {
            return Err(Error::invalid("percentile must lie in (0, 100)"));
        }
        Ok(())
    }
}

/// Pull-away term: negative mean pairwise L1 distance over the batch.
/// Always <= 0; zero exactly when all images coincide.
pub fn pt_loss(batch: &ImageTensor) -> Result<f64> {
    let n = batch.batch();
    if n < 2 {
        return Err(Error::invalid(format!("pull-away term needs N >= 2, got {n}")));
    }
    let data = batch.data();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d = 0.0;
            for (a, b) in data
                .index_axis(ndarray::Axis(0), i)
                .iter()
                .zip(data.index_axis(ndarray::Axis(0), j).iter())
            {
                d += (a - b).abs();
            }
            total += 2.0 * d; // both ordered pairs (i,j) and (j,i)
        }
    }
    Ok(-total / (n * (n - 1)) as f64)
}

/// Gradient of [`pt_loss`] w.r.t. the batch, `(b, h, w, c)`.
pub fn pt_loss_grad(batch: &ImageTensor) -> Result<Array4<f64>> {
    let n = batch.batch();
    if n < 2 {
        return Err(Error::invalid(format!("pull-away term needs N >= 2, got {n}")));
    }
    let data = batch.data();
    let mut grad = Array4::<f64>::zeros(data.raw_dim());
    let scale = -2.0 / (n * (n - 1)) as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let xi = data.index_axis(ndarray::Axis(0), i);
            let xj = data.index_axis(ndarray::Axis(0), j);
            let mut gi = grad.index_axis_mut(ndarray::Axis(0), i);
            for ((g, &a), &b) in gi.iter_mut().zip(xi.iter()).zip(xj.iter()) {
                *g += scale * (a - b).signum() * if a == b { 0.0 } else { 1.0 };
            }
        }
    }
    Ok(grad)
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} out of range")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Outcome of one search.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub threshold: f64,
    pub initial_scores: Vec<f64>,
    pub final_scores: Vec<f64>,
    pub final_images: ImageTensor,
    pub success: Vec<bool>,
    /// Step at which each image first dropped below the threshold.
    pub first_success_step: Vec<Option<usize>>,
    pub steps_used: usize,
}

/// Minimize `mean A(x_i) + lambda * PT` over a batch of images by Adam in
/// pixel space, clipping to the image range after every update. Stops early
/// once every image scores below the threshold.
pub fn fooling_search(
    bank: &mut DetectorBank,
    init: &ImageTensor,
    normal_scores: &[f64],
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    config.validate()?;
    let n = init.batch();
    if n == 0 {
        return Err(Error::invalid("empty probe batch"));
    }
    let threshold = percentile(normal_scores, config.percentile)?;
    let mut images = init.data().clone();
    let mut m = Array4::<f64>::zeros(images.raw_dim());
    let mut v = Array4::<f64>::zeros(images.raw_dim());
    let mut first_success: Vec<Option<usize>> = vec![None; n];
    let mut scores = vec![f64::NAN; n];
    let mut steps_used = 0;

    let score_all = |bank: &mut DetectorBank, images: &Array4<f64>| -> Result<(Vec<f64>, Array4<f64>)> {
        let mut grads = Array4::<f64>::zeros(images.raw_dim());
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let one = ImageTensor::new_unchecked(
                images
                    .index_axis(ndarray::Axis(0), i)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0)),
            );
            let (value, dx) = score_gradient(bank, &one, config.pooling)?;
            scores.push(value);
            grads
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&dx.index_axis(ndarray::Axis(0), 0));
        }
        // objective is the mean over the batch
        grads.mapv_inplace(|g| g / n as f64);
        Ok((scores, grads))
    };

    for step in 0..=config.max_steps {
        let (s, mut grad) = score_all(bank, &images)?;
        scores = s;
        for (i, &sc) in scores.iter().enumerate() {
            if !sc.is_finite() {
                return Err(Error::NonFinite(format!("probe score {sc} for image {i}")));
            }
            if sc < threshold && first_success[i].is_none() {
                first_success[i] = Some(step);
            }
        }
        steps_used = step;
        if scores.iter().all(|&sc| sc < threshold) || step == config.max_steps {
            break;
        }
        if config.lambda > 0.0 && n >= 2 {
            let batch = ImageTensor::new_unchecked(images.clone());
            let pt_g = pt_loss_grad(&batch)?;
            grad.scaled_add(config.lambda, &pt_g);
        }
        // Adam update on pixels
        let t = (step + 1) as i32;
        let b1t = 1.0 - config.beta1.powi(t);
        let b2t = 1.0 - config.beta2.powi(t);
        for (((x, mm), vv), g) in images
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(grad.iter())
        {
            *mm = config.beta1 * *mm + (1.0 - config.beta1) * g;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * g * g;
            let mh = *mm / b1t;
            let vh = *vv / b2t;
            *x -= config.lr * mh / (vh.sqrt() + 1e-8);
            *x = x.clamp(config.clip.0, config.clip.1);
        }
    }

    let success: Vec<bool> = scores.iter().map(|&sc| sc < threshold).collect();
    let initial_scores: Vec<f64> = {
        let (s, _) = score_all(bank, init.data())?;
        s
    };
    Ok(ProbeReport {
        threshold,
        initial_scores,
        final_scores: scores,
        final_images: ImageTensor::new_unchecked(images),
        success,
        first_success_step: first_success,
        steps_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn pt_identical_images_is_zero() {
        let data = Array4::from_elem((2, 2, 2, 1), 0.3);
        let t = ImageTensor::new(data).unwrap();
        assert_eq!(pt_loss(&t).unwrap(), 0.0);
    }

    #[test]
    fn pt_opposite_images_is_minus_two_d() {
        let mut data = Array4::zeros((2, 2, 2, 3));
        data.index_axis_mut(ndarray::Axis(0), 0).fill(-1.0);
        data.index_axis_mut(ndarray::Axis(0), 1).fill(1.0);
        let d = (2 * 2 * 3) as f64;
        let t = ImageTensor::new(data).unwrap();
        assert!((pt_loss(&t).unwrap() + 2.0 * d).abs() < 1e-12);
    }

    #[test]
    fn pt_three_point_example() {
        // pairwise L1 distances 2, 4, 6 -> -(2*(2+4+6))/6 = -4
        let mut data = Array4::zeros((3, 2, 2, 1));
        // x1 = 0 everywhere; x2 = 0.5 on two pixels (d12 = 1.0)... scale so
        // distances are 2, 4, 6 within the [-1, 1] range: use values along
        // one pixel axis of 4 pixels.
        // x1 = (0,0,0,0); x2 = (0.5,0.5,0.5,0.5) d=2; x3 = (1,1,1,1): d13=4, d23=2.
        // need d23 = 6 - impossible in range with these; instead craft:
        // x1 = -1 all (d12: |a|), choose x2, x3 to hit 2,4,6 over 4 pixels.
        // x1 = (-1,-1,-1,-1), x2 = (-0.5,-0.5,-0.5,-0.5): d12 = 2
        // x3 = (0,0,0,0): d13 = 4, d23 = 2 -> not 6. Use asymmetric pixels:
        // x3 = (0.5, 0.5, 0.5, 0.5): d13 = 6, d23 = 4.
        data.index_axis_mut(ndarray::Axis(0), 0).fill(-1.0);
        data.index_axis_mut(ndarray::Axis(0), 1).fill(-0.5);
        data.index_axis_mut(ndarray::Axis(0), 2).fill(0.5);
        let t = ImageTensor::new(data).unwrap();
        // d12 = 2, d13 = 6, d23 = 4 -> -(2*(2+6+4))/6 = -4
        assert!((pt_loss(&t).unwrap() + 4.0).abs() < 1e-12);
    }

    #[test]
    fn pt_needs_two() {
        let t = ImageTensor::new(Array4::zeros((1, 2, 2, 1))).unwrap();
        assert!(pt_loss(&t).is_err());
    }

    #[test]
    fn pt_permutation_invariant() {
        let data = Array4::from_shape_fn((4, 2, 2, 1), |(b, i, j, _)| {
            ((b * 7 + i * 3 + j) % 10) as f64 / 10.0 - 0.4
        });
        let t = ImageTensor::new(data.clone()).unwrap();
        let base = pt_loss(&t).unwrap();
        let perm = t.select(&[2, 0, 3, 1]);
        assert!((pt_loss(&perm).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn pt_gradient_matches_finite_differences() {
        let data = Array4::from_shape_fn((3, 2, 2, 1), |(b, i, j, _)| {
            ((b as f64) - 1.0) * 0.3 + (i as f64) * 0.11 - (j as f64) * 0.07
        });
        let t = ImageTensor::new(data.clone()).unwrap();
        let g = pt_loss_grad(&t).unwrap();
        let h = 1e-6;
        for idx in 0..data.len() {
            let mut plus = data.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = data.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let lp = pt_loss(&ImageTensor::new_unchecked(plus)).unwrap();
            let lm = pt_loss(&ImageTensor::new_unchecked(minus)).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn percentile_linear_interpolation() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let p = percentile(&scores, 95.0).unwrap();
        assert!((p - 0.955).abs() < 1e-12);
        assert_eq!(percentile(&scores, 0.0).unwrap(), 0.1);
        assert_eq!(percentile(&scores, 100.0).unwrap(), 1.0);
    }

    #[test]
    fn probe_config_validation() {
        let mut c = ProbeConfig::default();
        c.percentile = 100.0;
        assert!(c.validate().is_err());
        let mut c2 = ProbeConfig::default();
        c2.lambda = -1.0;
        assert!(c2.validate().is_err());
    }
}

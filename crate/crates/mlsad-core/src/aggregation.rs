//! Combining per-patch, per-level scores into image-level anomaly scores and
//! pixel-level localization maps.

use ndarray::{s, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::detectors::DetectorBank;
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// How patch scores pool into a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    /// Mean over patches within a level, then mean over levels.
    Average,
    /// Maximum over all patches and levels.
    Max,
    /// Smooth maximum per level (temperature log-mean-exp), then mean over
    /// levels.
    Softmax,
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "max" => Ok(Self::Max),
            "softmax" => Ok(Self::Softmax),
            other => Err(Error::invalid(format!("unknown pooling mode {other}"))),
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Average => write!(f, "average"),
            Self::Max => write!(f, "max"),
            Self::Softmax => write!(f, "softmax"),
        }
    }
}

pub const SOFTMAX_TEMPERATURE: f64 = 0.1;

/// Smooth maximum: `tau * ln(mean exp(s / tau))`. Monotone in every score
/// and bounded by the min and max.
fn log_mean_exp_pool(map: &Array2<f64>, tau: f64) -> f64 {
    let m = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = map.iter().map(|&v| ((v - m) / tau).exp()).sum();
    m + tau * (z / map.len() as f64).ln()
}

/// Pool per-level patch score maps into one scalar.
pub fn aggregate(maps: &[Array2<f64>], mode: PoolingMode) -> Result<f64> {
    if maps.is_empty() || maps.iter().any(|m| m.is_empty()) {
        return Err(Error::invalid("aggregate needs at least one non-empty score map"));
    }
    Ok(match mode {
        PoolingMode::Average => {
            let sum: f64 = maps.iter().map(|m| m.mean().unwrap()).sum();
            sum / maps.len() as f64
        }
        PoolingMode::Max => maps
            .iter()
            .flat_map(|m| m.iter().cloned())
            .fold(f64::NEG_INFINITY, f64::max),
        PoolingMode::Softmax => {
            let sum: f64 = maps
                .iter()
                .map(|m| log_mean_exp_pool(m, SOFTMAX_TEMPERATURE))
                .sum();
            sum / maps.len() as f64
        }
    })
}

/// Per-mode patch-score gradient of [`aggregate`], one map per level.
/// Used by the image-space search, which needs d(aggregate)/d(score).
pub fn aggregate_grads(maps: &[Array2<f64>], mode: PoolingMode) -> Vec<Array2<f64>> {
    let n_levels = maps.len() as f64;
    match mode {
        PoolingMode::Average => maps
            .iter()
            .map(|m| Array2::from_elem(m.raw_dim(), 1.0 / (n_levels * m.len() as f64)))
            .collect(),
        PoolingMode::Max => {
            let mut best = f64::NEG_INFINITY;
            let mut where_ = (0, 0, 0);
            for (li, m) in maps.iter().enumerate() {
                for ((i, j), &v) in m.indexed_iter() {
                    if v > best {
                        best = v;
                        where_ = (li, i, j);
                    }
                }
            }
            let mut out: Vec<Array2<f64>> =
                maps.iter().map(|m| Array2::zeros(m.raw_dim())).collect();
            out[where_.0][(where_.1, where_.2)] = 1.0;
            out
        }
        PoolingMode::Softmax => maps
            .iter()
            .map(|m| {
                let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps = m.mapv(|v| ((v - mx) / SOFTMAX_TEMPERATURE).exp());
                let z: f64 = exps.sum();
                exps.mapv(|e| e / z / n_levels)
            })
            .collect(),
    }
}

/// Paint each window's score over its `s x s` pixel footprint, averaging
/// overlaps, producing a `side x side` pixel map.
pub fn paint_patch_footprints(map: &Array2<f64>, level: usize, side: usize) -> Array2<f64> {
    let g = map.nrows();
    debug_assert_eq!(g, side - level + 1);
    let mut canvas = Array2::<f64>::zeros((side, side));
    let mut weight = Array2::<f64>::zeros((side, side));
    for ((i, j), &v) in map.indexed_iter() {
        canvas
            .slice_mut(s![i..i + level, j..j + level])
            .map_inplace(|c| *c += v);
        weight
            .slice_mut(s![i..i + level, j..j + level])
            .map_inplace(|w| *w += 1.0);
    }
    canvas.zip_mut_with(&weight, |c, &w| *c /= w);
    canvas
}

/// Pixel-level localization: paint each level's patch scores over their
/// footprints, bilinearly resize to the target resolution, and average
/// across levels.
pub fn localize(
    maps: &[(usize, Array2<f64>)],
    image_side: usize,
    target: usize,
) -> Result<Array2<f64>> {
    if maps.is_empty() {
        return Err(Error::invalid("localize needs at least one level map"));
    }
    if target == 0 {
        return Err(Error::invalid("target resolution must be positive"));
    }
    for (level, m) in maps {
        let expect = image_side - level + 1;
        if m.nrows() != expect || m.ncols() != expect {
            return Err(Error::invalid(format!(
                "level {level} map is {}x{}, expected {expect}x{expect} for side {image_side}",
                m.nrows(),
                m.ncols()
            )));
        }
    }
    let mut acc = Array2::<f64>::zeros((target, target));
    for (level, m) in maps {
        let painted = paint_patch_footprints(m, *level, image_side);
        let as4 = painted
            .into_shape_with_order((1, 1, image_side, image_side))
            .unwrap();
        let resized = mlsad_nn::ops::bilinear_resize(&as4, target, target);
        acc += &resized.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0);
    }
    acc.mapv_inplace(|v| v / maps.len() as f64);
    Ok(acc)
}

/// Scores of one image: per-level maps and means plus the pooled scalar.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub image_id: String,
    pub levels: Vec<usize>,
    pub maps: Vec<Array2<f64>>,
    pub per_level_means: Vec<f64>,
    pub aggregate: f64,
    pub mode: PoolingMode,
}

/// Per-level score grids of a single image, `(level, grid x grid)`.
pub fn single_image_grids(
    bank: &mut DetectorBank,
    x: &ImageTensor,
) -> Result<Vec<(usize, Array2<f64>)>> {
    if x.batch() != 1 {
        return Err(Error::invalid("expected a single image"));
    }
    Ok(bank
        .score_maps(x)?
        .into_iter()
        .map(|(level, m)| {
            let g = m.dim().2;
            let flat: Vec<f64> = m.iter().copied().collect();
            (level, Array2::from_shape_vec((g, g), flat).unwrap())
        })
        .collect())
}

/// Score one image with every detector in the bank (eval mode,
/// deterministic).
pub fn score_image(
    bank: &mut DetectorBank,
    image_id: &str,
    x: &ImageTensor,
    mode: PoolingMode,
) -> Result<ScoreRecord> {
    if x.batch() != 1 {
        return Err(Error::invalid("score_image expects a single image"));
    }
    let maps4 = bank.score_maps(x)?;
    let mut levels = Vec::new();
    let mut maps = Vec::new();
    for (level, m) in maps4 {
        let g = m.dim().2;
        let flat: Vec<f64> = m.iter().copied().collect();
        levels.push(level);
        maps.push(Array2::from_shape_vec((g, g), flat).unwrap());
    }
    let per_level_means: Vec<f64> = maps.iter().map(|m| m.mean().unwrap()).collect();
    let aggregate = aggregate(&maps, mode)?;
    Ok(ScoreRecord {
        image_id: image_id.to_string(),
        levels,
        maps,
        per_level_means,
        aggregate,
        mode,
    })
}

/// Batched scoring: per-level maps for a whole batch at once, returning one
/// record per image. Identical results to calling [`score_image`] per image
/// for batch-size-independent networks (detectors have no batch coupling in
/// eval mode).
pub fn score_batch(
    bank: &mut DetectorBank,
    ids: &[String],
    x: &ImageTensor,
    mode: PoolingMode,
) -> Result<Vec<ScoreRecord>> {
    if ids.len() != x.batch() {
        return Err(Error::invalid("id/batch length mismatch"));
    }
    let maps4 = bank.score_maps(x)?;
    let mut out = Vec::with_capacity(ids.len());
    for (bi, id) in ids.iter().enumerate() {
        let mut levels = Vec::new();
        let mut maps = Vec::new();
        for (level, m) in &maps4 {
            let g = m.dim().2;
            let slice = m.slice(s![bi, 0, .., ..]).to_owned();
            debug_assert_eq!(slice.nrows(), g);
            levels.push(*level);
            maps.push(slice);
        }
        let per_level_means: Vec<f64> = maps.iter().map(|m| m.mean().unwrap()).collect();
        let aggregate = aggregate(&maps, mode)?;
        out.push(ScoreRecord {
            image_id: id.clone(),
            levels,
            maps,
            per_level_means,
            aggregate,
            mode,
        });
    }
    Ok(out)
}

/// Gradient of the pooled score w.r.t. the image, summed over levels, for a
/// single-image batch. Returns `(aggregate, d aggregate / d x)` with the
/// gradient in `(1, side, side, channels)` layout.
pub fn score_gradient(
    bank: &mut DetectorBank,
    x: &ImageTensor,
    mode: PoolingMode,
) -> Result<(f64, Array4<f64>)> {
    if x.batch() != 1 {
        return Err(Error::invalid("score_gradient expects a single image"));
    }
    let side = x.side();
    let ch = x.channels();
    let x_nchw = x.to_nchw();
    let mut maps: Vec<Array2<f64>> = Vec::new();
    let mut tapes = Vec::new();
    for det in bank.iter_mut() {
        let g = det.config.grid_side();
        let coords = crate::types::make_true_coordinate_map(g, g, 1)?.to_nchw();
        let (y, tape) = det.net.forward_eval(&x_nchw, &[&coords]);
        let flat: Vec<f64> = y.iter().copied().collect();
        maps.push(Array2::from_shape_vec((g, g), flat).unwrap());
        tapes.push((y.dim(), tape));
    }
    let value = aggregate(&maps, mode)?;
    let grads = aggregate_grads(&maps, mode);
    let mut dx_total = Array4::<f64>::zeros((1, ch, side, side));
    for ((det, (dim, tape)), g2) in bank.iter_mut().zip(tapes.iter()).zip(grads.iter()) {
        let dy = Array4::from_shape_vec(*dim, g2.iter().copied().collect()).unwrap();
        let dx = det.net.backward(tape, &dy);
        dx_total += &dx;
    }
    let dx_bhwc = dx_total.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned();
    Ok((value, dx_bhwc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn average_of_level_means() {
        let maps = vec![
            Array2::from_elem((2, 2), 0.2),
            Array2::from_elem((3, 3), 0.4),
            Array2::from_elem((1, 1), 0.6),
        ];
        let a = aggregate(&maps, PoolingMode::Average).unwrap();
        assert!((a - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_single_patch_any_mode() {
        let maps = vec![Array2::from_elem((1, 1), 0.73)];
        for mode in [PoolingMode::Average, PoolingMode::Max, PoolingMode::Softmax] {
            let a = aggregate(&maps, mode).unwrap();
            assert!((a - 0.73).abs() < 1e-9, "{mode}: {a}");
        }
    }

    #[test]
    fn max_mode_takes_global_max() {
        let maps = vec![array![[0.1, 0.3]], array![[0.9]]];
        assert!((aggregate(&maps, PoolingMode::Max).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(aggregate(&[], PoolingMode::Average).is_err());
    }

    #[test]
    fn modes_are_ordered_and_bounded() {
        let maps = vec![array![[0.2, 0.8], [0.5, 0.6]], array![[0.4, 0.1]]];
        let avg = aggregate(&maps, PoolingMode::Average).unwrap();
        let mx = aggregate(&maps, PoolingMode::Max).unwrap();
        let sm = aggregate(&maps, PoolingMode::Softmax).unwrap();
        let min = 0.1;
        assert!(mx >= avg && avg >= min);
        assert!(sm <= mx + 1e-12 && sm >= min - 1e-12);
    }

    #[test]
    fn monotone_in_every_patch_score() {
        let base = vec![array![[0.2, 0.8], [0.5, 0.6]], array![[0.4, 0.1]]];
        for mode in [PoolingMode::Average, PoolingMode::Max, PoolingMode::Softmax] {
            let a0 = aggregate(&base, mode).unwrap();
            for li in 0..base.len() {
                for idx in 0..base[li].len() {
                    let mut bumped = base.clone();
                    bumped[li].as_slice_mut().unwrap()[idx] += 0.05;
                    let a1 = aggregate(&bumped, mode).unwrap();
                    assert!(
                        a1 >= a0 - 1e-12,
                        "{mode} decreased: {a0} -> {a1} at level {li} idx {idx}"
                    );
                }
            }
        }
    }

    #[test]
    fn localize_constant_maps_give_constant_mean() {
        let maps = vec![
            (1usize, Array2::from_elem((4, 4), 0.2)),
            (2usize, Array2::from_elem((3, 3), 0.6)),
        ];
        let h = localize(&maps, 4, 8).unwrap();
        for &v in h.iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn localize_single_level_identity_at_level_one() {
        let m = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64 / 16.0);
        let h = localize(&[(1, m.clone())], 4, 4).unwrap();
        assert_eq!(h, m);
    }

    #[test]
    fn localize_hot_patch_peaks_inside_footprint() {
        let mut m = Array2::zeros((6, 6)); // level 3 on side 8
        m[(4, 1)] = 1.0;
        let h = localize(&[(3, m)], 8, 8).unwrap();
        let (mut bi, mut bj, mut best) = (0, 0, f64::MIN);
        for ((i, j), &v) in h.indexed_iter() {
            if v > best {
                best = v;
                bi = i;
                bj = j;
            }
        }
        assert!(
            (4..7).contains(&bi) && (1..4).contains(&bj),
            "argmax ({bi},{bj}) outside footprint"
        );
    }

    #[test]
    fn localize_output_within_input_bounds() {
        let m1 = Array2::from_shape_fn((5, 5), |(i, j)| ((i * j) as f64 * 0.07).fract());
        let m2 = Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) as f64 * 0.11).fract());
        let lo = m1
            .iter()
            .chain(m2.iter())
            .cloned()
            .fold(f64::MAX, f64::min);
        let hi = m1
            .iter()
            .chain(m2.iter())
            .cloned()
            .fold(f64::MIN, f64::max);
        let h = localize(&[(4, m1), (1, m2)], 8, 16).unwrap();
        for &v in h.iter() {
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
        }
    }

    #[test]
    fn aggregate_invariant_to_order() {
        let a = array![[0.3, 0.4]];
        let b = array![[0.9]];
        for mode in [PoolingMode::Average, PoolingMode::Max, PoolingMode::Softmax] {
            let x = aggregate(&[a.clone(), b.clone()], mode).unwrap();
            let y = aggregate(&[b.clone(), a.clone()], mode).unwrap();
            assert!((x - y).abs() < 1e-15);
        }
    }
}

//! Shared domain types: image batches, patch grids, coordinate maps, level
//! bookkeeping, and seeded randomness.

use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A batch of square images, `(batch, height, width, channels)`, intensities
/// in `[-1, 1]`. Heights are powers of two.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array4<f64>,
}

impl ImageTensor {
    /// Wrap a `(b, h, w, c)` array, checking the range and shape invariants.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (_, h, w, _) = data.dim();
        if h != w {
            return Err(Error::invalid(format!("images must be square, got {h}x{w}")));
        }
        if h == 0 || !h.is_power_of_two() {
            return Err(Error::invalid(format!("image side must be a power of two, got {h}")));
        }
        for &v in data.iter() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("intensity {v} outside [-1, 1]")));
            }
        }
        Ok(Self { data })
    }

    /// Wrap without the range scan; for tensors produced by code that
    /// already guarantees the invariants (clamping, tanh outputs).
    pub(crate) fn new_unchecked(data: Array4<f64>) -> Self {
        debug_assert!(data.dim().1 == data.dim().2);
        Self { data }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }

    pub fn is_empty(&self) -> bool {
        self.batch() == 0
    }

    /// Select a sub-batch by indices.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self { data: self.data.select(Axis(0), indices) }
    }

    /// Stack single-image tensors of identical geometry into one batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("cannot stack an empty image list"));
        }
        let (side, ch) = (images[0].side(), images[0].channels());
        let total: usize = images.iter().map(|t| t.batch()).sum();
        let mut out = Array4::zeros((total, side, side, ch));
        let mut row = 0;
        for t in images {
            if t.side() != side || t.channels() != ch {
                return Err(Error::invalid("stacked images must share geometry"));
            }
            for b in 0..t.batch() {
                out.index_axis_mut(Axis(0), row)
                    .assign(&t.data.index_axis(Axis(0), b));
                row += 1;
            }
        }
        Ok(Self { data: out })
    }

    /// Channels-first view for the network stack.
    pub fn to_nchw(&self) -> Array4<f64> {
        self.data.clone().permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
    }

    /// Build from a channels-first array (values assumed in range).
    pub fn from_nchw(nchw: &Array4<f64>) -> Self {
        Self { data: nchw.clone().permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned() }
    }
}

/// The set of all `s x s` windows at stride 1 in a square image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub level: usize,
    pub image_side: usize,
}

impl PatchGrid {
    /// Grid side: number of window positions along one axis.
    pub fn grid_side(&self) -> usize {
        self.image_side - self.level + 1
    }

    /// Total number of windows.
    pub fn len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Iterate window top-left corners in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let g = self.grid_side();
        (0..g).flat_map(move |i| (0..g).map(move |j| (i, j)))
    }
}

/// All `s x s` windows of an `image_side`-sized image.
pub fn patch_grid_for(image_side: usize, s: usize) -> Result<PatchGrid> {
    if s < 1 || s > image_side {
        return Err(Error::invalid(format!(
            "patch side {s} out of range for image side {image_side}"
        )));
    }
    Ok(PatchGrid { level: s, image_side })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    True,
    Fake,
}

/// A 2-channel spatial coordinate field, `(batch, grid_h, grid_w, 2)`.
/// Channel 0 varies with the column, channel 1 with the row; both span
/// `[-1, 1]`. Fake maps hold i.i.d. uniform values in the same range.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub data: Array4<f64>,
    pub kind: CoordKind,
}

impl CoordinateMap {
    pub fn grid(&self) -> (usize, usize) {
        let d = self.data.dim();
        (d.1, d.2)
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    /// Channels-first `(b, 2, h, w)` view for concatenation into networks.
    pub fn to_nchw(&self) -> Array4<f64> {
        self.data.clone().permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
    }
}

/// Normalized coordinate of index `i` in a length-`n` axis. The degenerate
/// single-cell axis takes the lower corner value -1.
fn axis_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        -1.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// True coordinate map: identical across the batch, linear in each axis.
pub fn make_true_coordinate_map(grid_h: usize, grid_w: usize, batch: usize) -> Result<CoordinateMap> {
    if grid_h == 0 || grid_w == 0 || batch == 0 {
        return Err(Error::invalid("coordinate map dimensions must be positive"));
    }
    let mut data = Array4::zeros((batch, grid_h, grid_w, 2));
    for i in 0..grid_h {
        for j in 0..grid_w {
            let x = axis_coord(j, grid_w);
            let y = axis_coord(i, grid_h);
            for b in 0..batch {
                data[(b, i, j, 0)] = x;
                data[(b, i, j, 1)] = y;
            }
        }
    }
    Ok(CoordinateMap { data, kind: CoordKind::True })
}

/// A window of the true coordinate map of a larger grid: cell `(i, j)` of the
/// output carries the coordinates of cell `(top + i, left + j)` in the
/// `(full_h, full_w)` grid. Used when detectors train on crops but must see
/// their position within the full image.
pub fn true_coordinate_map_window(
    full_h: usize,
    full_w: usize,
    top: usize,
    left: usize,
    win_h: usize,
    win_w: usize,
    batch: usize,
) -> Result<CoordinateMap> {
    if top + win_h > full_h || left + win_w > full_w {
        return Err(Error::invalid("coordinate window exceeds the full grid"));
    }
    let full = make_true_coordinate_map(full_h, full_w, batch)?;
    let data = full
        .data
        .slice(s![.., top..top + win_h, left..left + win_w, ..])
        .to_owned();
    Ok(CoordinateMap { data, kind: CoordKind::True })
}

/// Fake coordinate map: every element i.i.d. uniform on `[-1, 1]`.
pub fn make_fake_coordinate_map(
    grid_h: usize,
    grid_w: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CoordinateMap> {
    if grid_h == 0 || grid_w == 0 || batch == 0 {
        return Err(Error::invalid("coordinate map dimensions must be positive"));
    }
    let data = Array4::from_shape_simple_fn((batch, grid_h, grid_w, 2), || {
        rng.random_range(-1.0..=1.0)
    });
    Ok(CoordinateMap { data, kind: CoordKind::Fake })
}

/// One detector/generator level and its contrast source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub detect_level: usize,
    /// Highest detector level is `2^max_exponent`.
    pub max_exponent: u32,
    /// Image side is `2^image_exponent`.
    pub image_exponent: u32,
}

impl LevelSpec {
    pub fn new(detect_level: usize, max_exponent: u32, image_exponent: u32) -> Result<Self> {
        if !detect_level.is_power_of_two() || detect_level > 1 << max_exponent {
            return Err(Error::invalid(format!(
                "detect level {detect_level} must be a power of two at most 2^{max_exponent}"
            )));
        }
        if max_exponent > image_exponent {
            return Err(Error::invalid(format!(
                "max level exponent {max_exponent} exceeds image exponent {image_exponent}"
            )));
        }
        Ok(Self { detect_level, max_exponent, image_exponent })
    }

    /// Level whose samples expose structure anomalies for this detector.
    pub fn source_level(&self) -> usize {
        self.detect_level / 2
    }

    pub fn image_side(&self) -> usize {
        1 << self.image_exponent
    }
}

/// Seed plus per-consumer stream ids. Identical `(seed, stream)` pairs give
/// identical draw sequences; a stream belongs to exactly one consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomSource {
    pub seed: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

/// Well-known stream ids so consumers never collide.
pub mod streams {
    pub const LEVEL0: u64 = 1;
    pub const LEVEL1: u64 = 2;
    pub const GAN_INIT: u64 = 10;
    pub const GAN_NOISE: u64 = 11;
    pub const GAN_DATA: u64 = 12;
    pub const DET_INIT: u64 = 20;
    pub const DET_DATA: u64 = 21;
    pub const DET_FAKE_COORDS: u64 = 22;
    pub const DET_FORWARD: u64 = 23;
    pub const DET_SOURCE: u64 = 24;
    pub const PROBE: u64 = 30;
    pub const EVAL_NOISE: u64 = 40;

    /// Offset a base stream by a level so per-level consumers stay disjoint.
    pub fn for_level(base: u64, level: usize) -> u64 {
        base + 1000 * level as u64
    }
}

//! Samplers for the multi-level image approximations used as contrastive
//! sources: level 0 is uniform noise, level 1 shuffles pixels across the
//! batch axis, levels >= 2 come from trained generators (see the `patchgan`
//! module). The [`oracle`] submodule verifies the underlying distributional
//! claims exactly on tiny enumerable spaces.

pub mod oracle;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Uniform noise on `[-1, 1]`: the level-0 approximation of any image
/// distribution.
pub fn sample_level0(
    batch: usize,
    side: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let data = Array4::from_shape_simple_fn((batch, side, side, channels), || {
        rng.random_range(-1.0..=1.0)
    });
    ImageTensor::new_unchecked(data)
}

/// Level-1 approximation: for every pixel position, permute the batch's
/// pixel values (all channels move together). Exact by construction: each
/// position's value multiset is preserved.
pub fn sample_level1(normal_batch: &ImageTensor, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let b = normal_batch.batch();
    if b < 2 {
        return Err(Error::invalid(format!(
            "batch-axis shuffle needs at least 2 images, got {b}"
        )));
    }
    let src = normal_batch.data();
    let (_, h, w, c) = src.dim();
    let mut out = Array4::zeros((b, h, w, c));
    let mut perm: Vec<usize> = (0..b).collect();
    for i in 0..h {
        for j in 0..w {
            perm.shuffle(rng);
            for (k, &p) in perm.iter().enumerate() {
                for ch in 0..c {
                    out[(k, i, j, ch)] = src[(p, i, j, ch)];
                }
            }
        }
    }
    Ok(ImageTensor::new_unchecked(out))
}

/// A source of images at a fixed approximation level. Detector training
/// pulls its structure-anomaly batches through this.
pub trait SourceSampler {
    fn level(&self) -> usize;
    fn sample(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor>;
}

/// Level 0: uniform noise of the dataset's geometry.
pub struct Level0Sampler {
    pub side: usize,
    pub channels: usize,
}

impl SourceSampler for Level0Sampler {
    fn level(&self) -> usize {
        0
    }

    fn sample(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        Ok(sample_level0(n, self.side, self.channels, rng))
    }
}

/// Level 1: draws a batch from a pool of normal images and shuffles pixels
/// across it.
pub struct Level1Sampler {
    pool: ImageTensor,
}

impl Level1Sampler {
    pub fn new(pool: ImageTensor) -> Result<Self> {
        if pool.batch() < 2 {
            return Err(Error::invalid("level-1 sampler needs a pool of at least 2 images"));
        }
        Ok(Self { pool })
    }
}

impl SourceSampler for Level1Sampler {
    fn level(&self) -> usize {
        1
    }

    fn sample(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        if n == 0 {
            return Ok(self.pool.select(&[]));
        }
        let pool_n = self.pool.batch();
        let indices: Vec<usize> = if n <= pool_n {
            rand::seq::index::sample(rng, pool_n, n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..pool_n)).collect()
        };
        let batch = self.pool.select(&indices);
        if batch.batch() < 2 {
            return Err(Error::invalid("shuffle batch too small"));
        }
        sample_level1(&batch, rng)
    }
}

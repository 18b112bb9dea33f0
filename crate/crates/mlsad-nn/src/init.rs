//! Weight initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Initialization scheme for a weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He initialization tuned for leaky-ReLU (slope 0.2) layers.
    KaimingLrelu,
    /// Glorot initialization for sigmoid/tanh output layers.
    Xavier,
}

impl Init {
    pub fn sample(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ArrayD<f64> {
        let std = match self {
            Init::KaimingLrelu => (2.0 / (fan_in as f64 * (1.0 + 0.2f64 * 0.2))).sqrt(),
            Init::Xavier => (2.0 / (fan_in as f64 + fan_out as f64)).sqrt(),
        };
        let normal = Normal::new(0.0, std).unwrap();
        ArrayD::from_shape_simple_fn(shape.to_vec(), || normal.sample(rng))
    }
}

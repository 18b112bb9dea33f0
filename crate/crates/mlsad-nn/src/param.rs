//! Trainable parameters: a value plus an accumulated gradient.

use ndarray::ArrayD;

/// A trainable tensor. Gradients accumulate across backward passes until
/// reset with [`Param::zero_grad`].
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

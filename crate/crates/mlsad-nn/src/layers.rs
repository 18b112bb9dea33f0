//! Layers with explicit forward/backward implementations.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1};
use rand::Rng;

use crate::init::Init;
use crate::ops;
use crate::param::Param;
use crate::T4;

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Tanh,
}

pub const LRELU_SLOPE: f64 = 0.2;

impl Activation {
    pub fn forward(self, x: &T4) -> T4 {
        match self {
            Activation::LeakyRelu => x.mapv(|v| if v > 0.0 { v } else { LRELU_SLOPE * v }),
            Activation::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Tanh => x.mapv(f64::tanh),
        }
    }

    /// `cache` is the input for LeakyRelu, the output for Sigmoid/Tanh.
    pub fn backward(self, cache: &T4, dy: &T4) -> T4 {
        let mut dx = dy.clone();
        match self {
            Activation::LeakyRelu => {
                dx.zip_mut_with(cache, |g, &x| {
                    if x <= 0.0 {
                        *g *= LRELU_SLOPE;
                    }
                });
            }
            Activation::Sigmoid => {
                dx.zip_mut_with(cache, |g, &y| *g *= y * (1.0 - y));
            }
            Activation::Tanh => {
                dx.zip_mut_with(cache, |g, &y| *g *= 1.0 - y * y);
            }
        }
        dx
    }
}

/// Spectral normalization state for a weight matrix (power iteration).
#[derive(Debug, Clone)]
pub struct SpectralNorm {
    /// Left singular-vector estimate, length = rows of the 2-D weight view.
    pub u: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct SnCache {
    pub sigma: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

const SN_EPS: f64 = 1e-12;

fn l2_normalized(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    v / (n + SN_EPS)
}

impl SpectralNorm {
    pub fn new(rows: usize, rng: &mut impl Rng) -> Self {
        let u = Array1::from_shape_fn(rows, |_| rng.random_range(-1.0..1.0));
        Self { u: l2_normalized(&u) }
    }

    /// Normalize `w2` by its estimated top singular value. In train mode the
    /// stored `u` advances by one power iteration; eval leaves it untouched.
    pub fn apply(&mut self, w2: &Array2<f64>, train: bool) -> (Array2<f64>, SnCache) {
        let v = l2_normalized(&w2.t().dot(&self.u));
        let u = l2_normalized(&w2.dot(&v));
        let sigma = u.dot(&w2.dot(&v)).max(SN_EPS);
        if train {
            self.u = u.clone();
        }
        (w2 / sigma, SnCache { sigma, u, v })
    }

    /// Gradient w.r.t. the raw weight given the gradient w.r.t. the
    /// normalized weight (`u`, `v` treated as constants).
    pub fn backward(cache: &SnCache, w2_hat: &Array2<f64>, dw_hat: &Array2<f64>) -> Array2<f64> {
        let inner: f64 = dw_hat.iter().zip(w2_hat.iter()).map(|(a, b)| a * b).sum();
        let mut dw = dw_hat / cache.sigma;
        let coef = inner / cache.sigma;
        for (i, &ui) in cache.u.iter().enumerate() {
            let mut row = dw.row_mut(i);
            row.scaled_add(-coef * ui, &cache.v);
        }
        dw
    }
}

/// 2-D convolution. Zero padding only when `pad > 0`; `pad = 0` gives a valid
/// convolution whose outputs depend on exactly their window.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param, // (oc, ic, kh, kw)
    pub b: Param, // (oc,)
    pub stride: usize,
    pub pad: usize,
    pub sn: Option<SpectralNorm>,
}

#[derive(Debug)]
pub struct ConvCache {
    pub x: T4,
    pub w_eff: Array2<f64>,
    pub sn: Option<SnCache>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ic: usize,
        oc: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        init: Init,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = ic * kh * kw;
        let fan_out = oc * kh * kw;
        let w = init.sample(&[oc, ic, kh, kw], fan_in, fan_out, rng);
        Self {
            w: Param::new(w),
            b: Param::new(ArrayD::zeros(vec![oc])),
            stride,
            pad,
            sn: spectral_norm.then(|| SpectralNorm::new(oc, rng)),
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.w.value.shape();
        (d[2], d[3])
    }

    fn w2(&self) -> Array2<f64> {
        let d = self.w.value.shape();
        self.w
            .value
            .to_shape((d[0], d[1] * d[2] * d[3]))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&mut self, x: &T4, train: bool) -> (T4, ConvCache) {
        let (kh, kw) = self.kernel();
        let raw = self.w2();
        let (w_eff, sn) = match self.sn.as_mut() {
            Some(s) => {
                let (w, c) = s.apply(&raw, train);
                (w, Some(c))
            }
            None => (raw, None),
        };
        let bias = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        let y = ops::conv_forward(x, &w_eff, &bias.to_owned(), kh, kw, self.stride, self.pad);
        (
            y,
            ConvCache {
                x: x.clone(),
                w_eff,
                sn,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: &T4) -> T4 {
        let (kh, kw) = self.kernel();
        let (dx, dw_eff, db) =
            ops::conv_backward(&cache.x, &cache.w_eff, dy, kh, kw, self.stride, self.pad);
        let dw = match (&cache.sn, self.sn.as_ref()) {
            (Some(c), Some(_)) => SpectralNorm::backward(c, &cache.w_eff, &dw_eff),
            _ => dw_eff,
        };
        let shape = self.w.value.raw_dim();
        self.w.grad += &dw.into_shape_with_order(shape).unwrap();
        self.b.grad += &db.into_dyn();
        dx
    }
}

/// Fully connected layer applied to `(batch, features, 1, 1)` tensors.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Param, // (out, in)
    pub b: Param, // (out,)
    pub sn: Option<SpectralNorm>,
}

#[derive(Debug)]
pub struct DenseCache {
    pub x: Array2<f64>, // (batch, in)
    pub w_eff: Array2<f64>,
    pub sn: Option<SnCache>,
}

impl Dense {
    pub fn new(inp: usize, out: usize, init: Init, spectral_norm: bool, rng: &mut impl Rng) -> Self {
        let w = init.sample(&[out, inp], inp, out, rng);
        Self {
            w: Param::new(w),
            b: Param::new(ArrayD::zeros(vec![out])),
            sn: spectral_norm.then(|| SpectralNorm::new(out, rng)),
        }
    }

    pub fn forward(&mut self, x: &T4, train: bool) -> (T4, DenseCache) {
        let (b, c, h, w) = x.dim();
        assert!(h == 1 && w == 1, "Dense expects (b, n, 1, 1), got {:?}", x.dim());
        let x2 = x.to_shape((b, c)).unwrap().to_owned();
        let raw = self
            .w
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let (w_eff, sn) = match self.sn.as_mut() {
            Some(s) => {
                let (w, cch) = s.apply(&raw, train);
                (w, Some(cch))
            }
            None => (raw, None),
        };
        let mut y2 = x2.dot(&w_eff.t());
        let bias = self.b.value.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in y2.axis_iter_mut(Axis(0)) {
            row += &bias;
        }
        let out = y2.nrows();
        let feats = y2.ncols();
        let y = y2.into_shape_with_order((out, feats, 1, 1)).unwrap();
        (y, DenseCache { x: x2, w_eff, sn })
    }

    pub fn backward(&mut self, cache: &DenseCache, dy: &T4) -> T4 {
        let (b, m, _, _) = dy.dim();
        let dy2 = dy.to_shape((b, m)).unwrap().to_owned();
        let dw_eff = dy2.t().dot(&cache.x); // (out, in)
        let db = dy2.sum_axis(Axis(0));
        let dx2 = dy2.dot(&cache.w_eff); // (b, in)
        let dw = match (&cache.sn, self.sn.as_ref()) {
            (Some(c), Some(_)) => SpectralNorm::backward(c, &cache.w_eff, &dw_eff),
            _ => dw_eff,
        };
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let n = dx2.ncols();
        dx2.into_shape_with_order((b, n, 1, 1)).unwrap()
    }
}

/// Per-channel batch normalization with running statistics for eval.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug)]
pub struct BnCache {
    pub xhat: T4,
    pub inv_std: Array1<f64>,
    pub train: bool,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::ones(vec![c])),
            beta: Param::new(ArrayD::zeros(vec![c])),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&mut self, x: &T4, train: bool) -> (T4, BnCache) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let (mean, var) = if train {
                let mean = ch.sum() / n;
                let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                self.running_mean[ci] =
                    (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] =
                    (1.0 - self.momentum) * self.running_var[ci] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ci], self.running_var[ci])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let mut dst = xhat.index_axis_mut(Axis(1), ci);
            dst.map_inplace(|v| *v = (*v - mean) * istd);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma.value[ci];
            let bt = self.beta.value[ci];
            y.index_axis_mut(Axis(1), ci).map_inplace(|v| *v = *v * g + bt);
        }
        (y, BnCache { xhat, inv_std, train })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &T4) -> T4 {
        let (b, c, h, w) = dy.dim();
        let n = (b * h * w) as f64;
        let mut dx = T4::zeros((b, c, h, w));
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            self.beta.grad[ci] += sum_dy;
            self.gamma.grad[ci] += sum_dy_xhat;
            let g = self.gamma.value[ci];
            let istd = cache.inv_std[ci];
            let mut dst = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                // d/dx of ((x - mu) * istd) with batch-dependent mu, istd
                for ((d, &gy), &xv) in dst.iter_mut().zip(dyc.iter()).zip(xh.iter()) {
                    *d = g * istd * (gy - sum_dy / n - xv * sum_dy_xhat / n);
                }
            } else {
                for (d, &gy) in dst.iter_mut().zip(dyc.iter()) {
                    *d = g * istd * gy;
                }
            }
        }
        dx
    }
}

//! Networks as flat op sequences with skip-connection slots.
//!
//! This covers every architecture in the pipeline: plain stacks, UNet-style
//! encoder-decoders (`SaveSkip`/`ConcatSkip`), residual blocks
//! (`SaveSkip`/`AddSkip`), and mid-network injection of auxiliary inputs
//! (`ConcatExtern`). A forward pass records a [`Tape`]; `backward` replays it
//! in reverse, accumulating parameter gradients and returning the gradient
//! w.r.t. the network input.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array3, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{Activation, BatchNorm2d, BnCache, Conv2d, ConvCache, Dense, DenseCache};
use crate::ops;
use crate::param::Param;
use crate::T4;

pub enum Op {
    Conv(Conv2d),
    Dense(Dense),
    Act(Activation),
    BatchNorm(BatchNorm2d),
    /// Inverted dropout; identity in eval mode.
    Dropout { rate: f64 },
    /// Additive Gaussian noise; identity in eval mode.
    GaussNoise { std: f64 },
    /// Append `features` channels of batch-wide feature statistics.
    MinibatchStddev { features: usize },
    /// Bilinear x2 upsampling.
    Upsample2x,
    /// Concatenated adaptive average pools, flattened to (b, c*sum(k^2), 1, 1).
    PyramidPool { scales: Vec<usize> },
    Flatten,
    Unflatten { c: usize, h: usize, w: usize },
    SaveSkip { tag: usize },
    ConcatSkip { tag: usize },
    AddSkip { tag: usize },
    /// Concatenate an externally supplied tensor along the channel axis.
    ConcatExtern { slot: usize },
}

/// Shape-level description of one op, for architecture introspection.
#[derive(Debug, Clone, PartialEq)]
pub enum OpDesc {
    Conv { kernel: (usize, usize), stride: usize, pad: usize },
    Dense,
    Act(Activation),
    BatchNorm,
    Dropout,
    GaussNoise,
    MinibatchStddev,
    Upsample2x,
    PyramidPool,
    Flatten,
    Unflatten,
    SaveSkip,
    ConcatSkip,
    AddSkip,
    ConcatExtern { slot: usize },
}

enum Cache {
    Conv(ConvCache),
    Dense(DenseCache),
    Act(T4),
    BatchNorm(BnCache),
    Dropout(Option<T4>),
    Stddev { x: T4, mu: Array3<f64>, sigma: Array3<f64> },
    Upsample { ih: usize, iw: usize },
    Pyramid { ih: usize, iw: usize, c: usize },
    Shape { c: usize, h: usize, w: usize },
    Concat { stream_c: usize },
    None,
}

pub struct Tape {
    pub train: bool,
    caches: Vec<Cache>,
}

pub struct Net {
    pub ops: Vec<Op>,
}

const STDDEV_EPS: f64 = 1e-8;

fn minibatch_stddev_forward(x: &T4, features: usize) -> (T4, Array3<f64>, Array3<f64>) {
    let (b, c, h, w) = x.dim();
    assert!(c % features == 0, "stddev features must divide channels");
    let group = c / features;
    let nb = b as f64;
    let mut mu = Array3::<f64>::zeros((c, h, w));
    let mut sigma = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut m = 0.0;
                for bi in 0..b {
                    m += x[(bi, ci, i, j)];
                }
                m /= nb;
                let mut v = 0.0;
                for bi in 0..b {
                    let d = x[(bi, ci, i, j)] - m;
                    v += d * d;
                }
                mu[(ci, i, j)] = m;
                sigma[(ci, i, j)] = (v / nb + STDDEV_EPS).sqrt();
            }
        }
    }
    let mut y = T4::zeros((b, c + features, h, w));
    y.slice_mut(s![.., ..c, .., ..]).assign(x);
    let denom = (group * h * w) as f64;
    for f in 0..features {
        let stat = sigma.slice(s![f * group..(f + 1) * group, .., ..]).sum() / denom;
        y.slice_mut(s![.., c + f, .., ..]).fill(stat);
    }
    (y, mu, sigma)
}

fn minibatch_stddev_backward(
    x: &T4,
    mu: &Array3<f64>,
    sigma: &Array3<f64>,
    features: usize,
    dy: &T4,
) -> T4 {
    let (b, c, h, w) = x.dim();
    let group = c / features;
    let nb = b as f64;
    let denom = (group * h * w) as f64;
    let mut dx = dy.slice(s![.., ..c, .., ..]).to_owned();
    for f in 0..features {
        let gsum = dy.slice(s![.., c + f, .., ..]).sum();
        if gsum == 0.0 {
            continue;
        }
        let coef = gsum / denom;
        for ci in f * group..(f + 1) * group {
            for i in 0..h {
                for j in 0..w {
                    let s_ = sigma[(ci, i, j)];
                    let m = mu[(ci, i, j)];
                    for bi in 0..b {
                        dx[(bi, ci, i, j)] += coef * (x[(bi, ci, i, j)] - m) / (nb * s_);
                    }
                }
            }
        }
    }
    dx
}

fn pyramid_forward(x: &T4, scales: &[usize]) -> T4 {
    let (b, c, _, _) = x.dim();
    let total: usize = scales.iter().map(|k| c * k * k).sum();
    let mut y = T4::zeros((b, total, 1, 1));
    let mut off = 0;
    for &k in scales {
        let p = ops::adaptive_avg_pool(x, k); // (b, c, k, k)
        for bi in 0..b {
            let flat = p.slice(s![bi, .., .., ..]);
            for (idx, v) in flat.iter().enumerate() {
                y[(bi, off + idx, 0, 0)] = *v;
            }
        }
        off += c * k * k;
    }
    y
}

fn pyramid_backward(dy: &T4, scales: &[usize], c: usize, ih: usize, iw: usize) -> T4 {
    let b = dy.dim().0;
    let mut dx = T4::zeros((b, c, ih, iw));
    let mut off = 0;
    for &k in scales {
        let mut dp = T4::zeros((b, c, k, k));
        for bi in 0..b {
            let mut flat = dp.slice_mut(s![bi, .., .., ..]);
            for (idx, v) in flat.iter_mut().enumerate() {
                *v = dy[(bi, off + idx, 0, 0)];
            }
        }
        dx += &ops::adaptive_avg_pool_backward(&dp, ih, iw);
        off += c * k * k;
    }
    dx
}

impl Net {
    pub fn new(ops: Vec<Op>) -> Self {
        Self { ops }
    }

    pub fn describe(&self) -> Vec<OpDesc> {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Conv(c) => OpDesc::Conv { kernel: c.kernel(), stride: c.stride, pad: c.pad },
                Op::Dense(_) => OpDesc::Dense,
                Op::Act(a) => OpDesc::Act(*a),
                Op::BatchNorm(_) => OpDesc::BatchNorm,
                Op::Dropout { .. } => OpDesc::Dropout,
                Op::GaussNoise { .. } => OpDesc::GaussNoise,
                Op::MinibatchStddev { .. } => OpDesc::MinibatchStddev,
                Op::Upsample2x => OpDesc::Upsample2x,
                Op::PyramidPool { .. } => OpDesc::PyramidPool,
                Op::Flatten => OpDesc::Flatten,
                Op::Unflatten { .. } => OpDesc::Unflatten,
                Op::SaveSkip { .. } => OpDesc::SaveSkip,
                Op::ConcatSkip { .. } => OpDesc::ConcatSkip,
                Op::AddSkip { .. } => OpDesc::AddSkip,
                Op::ConcatExtern { slot } => OpDesc::ConcatExtern { slot: *slot },
            })
            .collect()
    }

    pub fn forward_train(&mut self, x: &T4, externs: &[&T4], rng: &mut ChaCha8Rng) -> (T4, Tape) {
        self.run(x, externs, true, Some(rng))
    }

    pub fn forward_eval(&mut self, x: &T4, externs: &[&T4]) -> (T4, Tape) {
        self.run(x, externs, false, None)
    }

    fn run(
        &mut self,
        x: &T4,
        externs: &[&T4],
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (T4, Tape) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut skips: HashMap<usize, T4> = HashMap::new();
        for op in self.ops.iter_mut() {
            let cache = match op {
                Op::Conv(conv) => {
                    let (y, c) = conv.forward(&cur, train);
                    cur = y;
                    Cache::Conv(c)
                }
                Op::Dense(d) => {
                    let (y, c) = d.forward(&cur, train);
                    cur = y;
                    Cache::Dense(c)
                }
                Op::Act(a) => {
                    let y = a.forward(&cur);
                    let keep = match a {
                        Activation::LeakyRelu => cur.clone(),
                        _ => y.clone(),
                    };
                    cur = y;
                    Cache::Act(keep)
                }
                Op::BatchNorm(bn) => {
                    let (y, c) = bn.forward(&cur, train);
                    cur = y;
                    Cache::BatchNorm(c)
                }
                Op::Dropout { rate } => {
                    if train {
                        let r = rng.as_deref_mut().expect("train mode needs rng");
                        let keep = 1.0 - *rate;
                        let mask =
                            T4::from_shape_simple_fn(cur.raw_dim(), || {
                                if r.random_range(0.0..1.0) < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            });
                        cur = &cur * &mask;
                        Cache::Dropout(Some(mask))
                    } else {
                        Cache::Dropout(None)
                    }
                }
                Op::GaussNoise { std } => {
                    if train {
                        let r = rng.as_deref_mut().expect("train mode needs rng");
                        let normal = Normal::new(0.0, *std).unwrap();
                        cur.map_inplace(|v| *v += normal.sample(r));
                    }
                    Cache::None
                }
                Op::MinibatchStddev { features } => {
                    let (y, mu, sigma) = minibatch_stddev_forward(&cur, *features);
                    let c = Cache::Stddev { x: cur.clone(), mu, sigma };
                    cur = y;
                    c
                }
                Op::Upsample2x => {
                    let (_, _, h, w) = cur.dim();
                    let y = ops::bilinear_resize(&cur, 2 * h, 2 * w);
                    let c = Cache::Upsample { ih: h, iw: w };
                    cur = y;
                    c
                }
                Op::PyramidPool { scales } => {
                    let (_, c, h, w) = cur.dim();
                    let y = pyramid_forward(&cur, scales);
                    let cache = Cache::Pyramid { ih: h, iw: w, c };
                    cur = y;
                    cache
                }
                Op::Flatten => {
                    let (b, c, h, w) = cur.dim();
                    cur = cur.into_shape_with_order((b, c * h * w, 1, 1)).unwrap();
                    Cache::Shape { c, h, w }
                }
                Op::Unflatten { c, h, w } => {
                    let (b, n, _, _) = cur.dim();
                    assert_eq!(n, *c * *h * *w, "unflatten size mismatch");
                    cur = cur.into_shape_with_order((b, *c, *h, *w)).unwrap();
                    Cache::Shape { c: n, h: 1, w: 1 }
                }
                Op::SaveSkip { tag } => {
                    skips.insert(*tag, cur.clone());
                    Cache::None
                }
                Op::ConcatSkip { tag } => {
                    let stream_c = cur.dim().1;
                    let skip = skips.get(tag).expect("skip saved before concat");
                    cur = concatenate(Axis(1), &[cur.view(), skip.view()]).unwrap();
                    Cache::Concat { stream_c }
                }
                Op::AddSkip { tag } => {
                    let skip = skips.get(tag).expect("skip saved before add");
                    cur = &cur + skip;
                    Cache::None
                }
                Op::ConcatExtern { slot } => {
                    let stream_c = cur.dim().1;
                    let ext = externs.get(*slot).expect("missing extern input");
                    cur = concatenate(Axis(1), &[cur.view(), ext.view()]).unwrap();
                    Cache::Concat { stream_c }
                }
            };
            caches.push(cache);
        }
        (cur, Tape { train, caches })
    }

    /// Backpropagate `dy` through the tape; parameter gradients accumulate,
    /// and the gradient w.r.t. the network input is returned. Gradients
    /// flowing into `ConcatExtern` inputs are discarded.
    pub fn backward(&mut self, tape: &Tape, dy: &T4) -> T4 {
        let mut g = dy.clone();
        let mut skip_g: HashMap<usize, T4> = HashMap::new();
        for (op, cache) in self.ops.iter_mut().zip(tape.caches.iter()).rev() {
            g = match (op, cache) {
                (Op::Conv(conv), Cache::Conv(c)) => conv.backward(c, &g),
                (Op::Dense(d), Cache::Dense(c)) => d.backward(c, &g),
                (Op::Act(a), Cache::Act(keep)) => a.backward(keep, &g),
                (Op::BatchNorm(bn), Cache::BatchNorm(c)) => bn.backward(c, &g),
                (Op::Dropout { .. }, Cache::Dropout(mask)) => match mask {
                    Some(m) => &g * m,
                    None => g,
                },
                (Op::GaussNoise { .. }, Cache::None) => g,
                (Op::MinibatchStddev { features }, Cache::Stddev { x, mu, sigma }) => {
                    minibatch_stddev_backward(x, mu, sigma, *features, &g)
                }
                (Op::Upsample2x, Cache::Upsample { ih, iw }) => {
                    ops::bilinear_resize_backward(&g, *ih, *iw)
                }
                (Op::PyramidPool { scales }, Cache::Pyramid { ih, iw, c }) => {
                    pyramid_backward(&g, scales, *c, *ih, *iw)
                }
                (Op::Flatten, Cache::Shape { c, h, w }) => {
                    let b = g.dim().0;
                    g.into_shape_with_order((b, *c, *h, *w)).unwrap()
                }
                (Op::Unflatten { .. }, Cache::Shape { c, .. }) => {
                    let b = g.dim().0;
                    g.into_shape_with_order((b, *c, 1, 1)).unwrap()
                }
                (Op::SaveSkip { tag }, Cache::None) => {
                    if let Some(extra) = skip_g.remove(tag) {
                        g + extra
                    } else {
                        g
                    }
                }
                (Op::ConcatSkip { tag }, Cache::Concat { stream_c }) => {
                    let gs = g.slice(s![.., *stream_c.., .., ..]).to_owned();
                    skip_g
                        .entry(*tag)
                        .and_modify(|acc| *acc += &gs)
                        .or_insert(gs);
                    g.slice(s![.., ..*stream_c, .., ..]).to_owned()
                }
                (Op::AddSkip { tag }, Cache::None) => {
                    skip_g
                        .entry(*tag)
                        .and_modify(|acc| *acc += &g)
                        .or_insert_with(|| g.clone());
                    g
                }
                (Op::ConcatExtern { .. }, Cache::Concat { stream_c }) => {
                    g.slice(s![.., ..*stream_c, .., ..]).to_owned()
                }
                _ => unreachable!("op/cache mismatch"),
            };
        }
        g
    }

    /// Trainable parameters in a stable order, named by op index.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, op) in self.ops.iter_mut().enumerate() {
            match op {
                Op::Conv(c) => {
                    out.push((format!("op{i}.w"), &mut c.w));
                    out.push((format!("op{i}.b"), &mut c.b));
                }
                Op::Dense(d) => {
                    out.push((format!("op{i}.w"), &mut d.w));
                    out.push((format!("op{i}.b"), &mut d.b));
                }
                Op::BatchNorm(bn) => {
                    out.push((format!("op{i}.gamma"), &mut bn.gamma));
                    out.push((format!("op{i}.beta"), &mut bn.beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state: BN running stats and spectral-norm vectors.
    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Array1<f64>)> {
        let mut out = Vec::new();
        for (i, op) in self.ops.iter_mut().enumerate() {
            match op {
                Op::Conv(c) => {
                    if let Some(sn) = c.sn.as_mut() {
                        out.push((format!("op{i}.sn_u"), &mut sn.u));
                    }
                }
                Op::Dense(d) => {
                    if let Some(sn) = d.sn.as_mut() {
                        out.push((format!("op{i}.sn_u"), &mut sn.u));
                    }
                }
                Op::BatchNorm(bn) => {
                    out.push((format!("op{i}.running_mean"), &mut bn.running_mean));
                    out.push((format!("op{i}.running_var"), &mut bn.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn grad_norm(&mut self) -> f64 {
        let mut acc = 0.0;
        for (_, p) in self.params_mut() {
            acc += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
        acc.sqrt()
    }

    pub fn take_grads(&mut self) -> Vec<ArrayD<f64>> {
        self.params_mut()
            .into_iter()
            .map(|(_, p)| {
                let g = p.grad.clone();
                p.zero_grad();
                g
            })
            .collect()
    }

    pub fn set_grads(&mut self, grads: &[ArrayD<f64>]) {
        for ((_, p), g) in self.params_mut().into_iter().zip(grads.iter()) {
            p.grad.assign(g);
        }
    }

    /// Snapshot of every parameter and buffer, for checkpointing.
    pub fn state_tensors(&mut self) -> Vec<(String, ArrayD<f64>)> {
        let mut out: Vec<(String, ArrayD<f64>)> = self
            .params_mut()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .collect();
        for (n, b) in self.buffers_mut() {
            out.push((n, b.clone().into_dyn()));
        }
        out
    }

    /// Restore parameters and buffers by name. Missing or misshapen entries
    /// are an error.
    pub fn load_state(&mut self, tensors: &HashMap<String, ArrayD<f64>>) -> crate::Result<()> {
        for (name, p) in self.params_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| crate::NnError::Format(format!("missing tensor {name}")))?;
            if t.shape() != p.value.shape() {
                return Err(crate::NnError::Shape(format!(
                    "tensor {name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(t);
        }
        for (name, b) in self.buffers_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| crate::NnError::Format(format!("missing buffer {name}")))?;
            let t1 = t
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| crate::NnError::Shape(format!("buffer {name} is not 1-D")))?;
            if t1.len() != b.len() {
                return Err(crate::NnError::Shape(format!("buffer {name} length mismatch")));
            }
            b.assign(&t1);
        }
        Ok(())
    }
}

//! Finite-difference verification of every backward pass.

use mlsad_nn::layers::{Activation, BatchNorm2d, Conv2d, Dense};
use mlsad_nn::net::{Net, Op};
use mlsad_nn::{Init, T4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t4(shape: (usize, usize, usize, usize), r: &mut ChaCha8Rng) -> T4 {
    T4::from_shape_simple_fn(shape, || r.random_range(-1.0..1.0))
}

/// Scalar loss: inner product with a fixed random projection.
struct Probe {
    p: T4,
}

impl Probe {
    fn new(shape: (usize, usize, usize, usize), r: &mut ChaCha8Rng) -> Self {
        Self { p: rand_t4(shape, r) }
    }
    fn loss(&self, y: &T4) -> f64 {
        (y * &self.p).sum()
    }
    fn dy(&self) -> T4 {
        self.p.clone()
    }
}

/// Relative L2 error, falling back to absolute when the reference gradient
/// is genuinely zero (e.g. a bias feeding train-mode batch norm).
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm < 1e-6 {
        diff
    } else {
        diff / norm
    }
}

/// FD check of input gradient (and optionally parameter gradients) for a net
/// whose forward is deterministic given a cloned rng state.
fn check_net(
    net: &mut Net,
    x: &T4,
    externs: &[&T4],
    train: bool,
    base_rng: Option<&ChaCha8Rng>,
    check_params: bool,
    tol: f64,
) {
    let mut prng = rng(777);
    let run = |net: &mut Net, x: &T4| -> (T4, mlsad_nn::Tape) {
        if train {
            let mut r = base_rng.unwrap().clone();
            net.forward_train(x, externs, &mut r)
        } else {
            net.forward_eval(x, externs)
        }
    };
    let (y, tape) = run(net, x);
    let probe = Probe::new(y.dim(), &mut prng);
    net.zero_grads();
    let dx = net.backward(&tape, &probe.dy());

    let h = 1e-5;
    // input gradient
    let mut fd = Vec::with_capacity(x.len());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let lp = probe.loss(&run(net, &xp).0);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let lm = probe.loss(&run(net, &xp).0);
        xp.as_slice_mut().unwrap()[idx] = orig;
        fd.push((lp - lm) / (2.0 * h));
    }
    let analytic: Vec<f64> = dx.iter().copied().collect();
    let e = rel_err(&analytic, &fd);
    assert!(e < tol, "input grad rel err {e} >= {tol}");

    if check_params {
        let grads: Vec<Vec<f64>> = {
            let params = net.params_mut();
            params.iter().map(|(_, p)| p.grad.iter().copied().collect()).collect()
        };
        let n_params = grads.len();
        for pi in 0..n_params {
            let n = grads[pi].len();
            let mut fd = Vec::with_capacity(n);
            for idx in 0..n {
                let orig = {
                    let mut params = net.params_mut();
                    let v = params[pi].1.value.as_slice_mut().unwrap();
                    let o = v[idx];
                    v[idx] = o + h;
                    o
                };
                let lp = probe.loss(&run(net, x).0);
                {
                    let mut params = net.params_mut();
                    params[pi].1.value.as_slice_mut().unwrap()[idx] = orig - h;
                }
                let lm = probe.loss(&run(net, x).0);
                {
                    let mut params = net.params_mut();
                    params[pi].1.value.as_slice_mut().unwrap()[idx] = orig;
                }
                fd.push((lp - lm) / (2.0 * h));
            }
            let e = rel_err(&grads[pi], &fd);
            assert!(e < tol, "param {pi} grad rel err {e} >= {tol}");
        }
    }
}

#[test]
fn conv_valid_stack() {
    let mut r = rng(1);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(3, 4, 2, 2, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(4, 2, 3, 3, 1, 0, Init::Xavier, false, &mut r)),
        Op::Act(Activation::Sigmoid),
    ]);
    let x = rand_t4((2, 3, 6, 6), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn conv_strided_padded() {
    let mut r = rng(2);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(2, 3, 4, 4, 2, 1, Init::KaimingLrelu, false, &mut r)),
        Op::Act(Activation::Tanh),
    ]);
    let x = rand_t4((2, 2, 8, 8), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn dense_head() {
    let mut r = rng(3);
    let net = &mut Net::new(vec![
        Op::Flatten,
        Op::Dense(Dense::new(2 * 3 * 3, 5, Init::KaimingLrelu, false, &mut r)),
        Op::Act(Activation::LeakyRelu),
        Op::Dense(Dense::new(5, 1, Init::Xavier, false, &mut r)),
    ]);
    let x = rand_t4((3, 2, 3, 3), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn batchnorm_train_and_eval() {
    let mut r = rng(4);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(2, 3, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::BatchNorm(BatchNorm2d::new(3)),
        Op::Act(Activation::LeakyRelu),
    ]);
    let x = rand_t4((3, 2, 4, 4), &mut r);
    // warm running stats, then check both modes
    let mut warm = rng(40);
    for _ in 0..5 {
        let xb = rand_t4((3, 2, 4, 4), &mut warm);
        net.forward_train(&xb, &[], &mut warm.clone());
    }
    let train_rng = rng(41);
    check_net(net, &x, &[], true, Some(&train_rng), true, 1e-6);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn minibatch_stddev() {
    let mut r = rng(5);
    let net = &mut Net::new(vec![
        Op::MinibatchStddev { features: 2 },
        Op::Conv(Conv2d::new(6, 2, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
    ]);
    let x = rand_t4((3, 4, 3, 3), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn upsample_bilinear() {
    let mut r = rng(6);
    let net = &mut Net::new(vec![
        Op::Upsample2x,
        Op::Conv(Conv2d::new(2, 1, 3, 3, 1, 1, Init::KaimingLrelu, false, &mut r)),
    ]);
    let x = rand_t4((2, 2, 3, 3), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn pyramid_pool() {
    let mut r = rng(7);
    let net = &mut Net::new(vec![
        Op::PyramidPool { scales: vec![1, 2] },
        Op::Dense(Dense::new(2 * 5, 1, Init::Xavier, false, &mut r)),
    ]);
    let x = rand_t4((2, 2, 4, 4), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn unet_concat_skip() {
    let mut r = rng(8);
    let net = &mut Net::new(vec![
        Op::SaveSkip { tag: 0 },
        Op::Conv(Conv2d::new(2, 2, 3, 3, 1, 1, Init::KaimingLrelu, false, &mut r)),
        Op::Act(Activation::LeakyRelu),
        Op::ConcatSkip { tag: 0 },
        Op::Conv(Conv2d::new(4, 1, 1, 1, 1, 0, Init::Xavier, false, &mut r)),
    ]);
    let x = rand_t4((2, 2, 4, 4), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn residual_block() {
    let mut r = rng(9);
    let net = &mut Net::new(vec![
        Op::SaveSkip { tag: 3 },
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(3, 3, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(3, 3, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::AddSkip { tag: 3 },
    ]);
    let x = rand_t4((2, 3, 3, 3), &mut r);
    check_net(net, &x, &[], false, None, true, 1e-6);
}

#[test]
fn extern_concat() {
    let mut r = rng(10);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(3, 2, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::ConcatExtern { slot: 0 },
        Op::Conv(Conv2d::new(4, 1, 1, 1, 1, 0, Init::Xavier, false, &mut r)),
        Op::Act(Activation::Sigmoid),
    ]);
    let x = rand_t4((2, 3, 4, 4), &mut r);
    let ext = rand_t4((2, 2, 4, 4), &mut r);
    check_net(net, &x, &[&ext], false, None, true, 1e-6);
}

#[test]
fn spectral_norm_conv() {
    let mut r = rng(11);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(2, 3, 2, 2, 1, 0, Init::KaimingLrelu, true, &mut r)),
        Op::Act(Activation::LeakyRelu),
    ]);
    let x = rand_t4((2, 2, 4, 4), &mut r);
    // converge the power iteration so the detached-u gradient is exact
    for _ in 0..200 {
        net.forward_train(&x, &[], &mut r.clone());
    }
    check_net(net, &x, &[], false, None, true, 1e-5);
}

#[test]
fn dropout_and_noise_with_fixed_stream() {
    let mut r = rng(12);
    let net = &mut Net::new(vec![
        Op::GaussNoise { std: 0.2236 },
        Op::Conv(Conv2d::new(2, 3, 1, 1, 1, 0, Init::KaimingLrelu, false, &mut r)),
        Op::Dropout { rate: 0.3 },
        Op::Conv(Conv2d::new(3, 1, 1, 1, 1, 0, Init::Xavier, false, &mut r)),
    ]);
    let x = rand_t4((2, 2, 3, 3), &mut r);
    let train_rng = rng(120);
    check_net(net, &x, &[], true, Some(&train_rng), true, 1e-6);
}

#[test]
fn eval_is_deterministic() {
    let mut r = rng(13);
    let net = &mut Net::new(vec![
        Op::Conv(Conv2d::new(3, 4, 2, 2, 1, 0, Init::KaimingLrelu, true, &mut r)),
        Op::MinibatchStddev { features: 4 },
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(8, 1, 1, 1, 1, 0, Init::Xavier, false, &mut r)),
        Op::Act(Activation::Sigmoid),
    ]);
    let x = rand_t4((2, 3, 5, 5), &mut r);
    let (y1, _) = net.forward_eval(&x, &[]);
    let (y2, _) = net.forward_eval(&x, &[]);
    for (a, b) in y1.iter().zip(y2.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn checkpoint_restores_forward_bitwise() {
    let mut r = rng(14);
    let build = |r: &mut ChaCha8Rng| {
        Net::new(vec![
            Op::Conv(Conv2d::new(2, 3, 2, 2, 1, 0, Init::KaimingLrelu, true, r)),
            Op::BatchNorm(BatchNorm2d::new(3)),
            Op::Act(Activation::LeakyRelu),
            Op::Flatten,
            Op::Dense(Dense::new(3 * 9, 1, Init::Xavier, false, r)),
        ])
    };
    let mut net = build(&mut r);
    let x = rand_t4((2, 2, 4, 4), &mut r);
    for _ in 0..3 {
        net.forward_train(&x, &[], &mut r.clone());
    }
    let (y, _) = net.forward_eval(&x, &[]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    mlsad_nn::checkpoint::save(&path, &serde_json::json!({}), &net.state_tensors()).unwrap();

    let mut net2 = build(&mut rng(999));
    let (_, tensors) = mlsad_nn::checkpoint::load(&path).unwrap();
    net2.load_state(&tensors).unwrap();
    let (y2, _) = net2.forward_eval(&x, &[]);
    for (a, b) in y.iter().zip(y2.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

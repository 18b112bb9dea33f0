//! Network builders: encoder-decoder generator with skip connections,
//! stride-1 patch discriminators with exact receptive fields, and the
//! statistics network for the mutual-information bound.

use mlsad_nn::layers::{Activation, BatchNorm2d, Conv2d, Dense};
use mlsad_nn::net::{Net, Op, OpDesc};
use mlsad_nn::Init;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Kernel decomposition realizing an exact `level x level` receptive field
/// with stride-1 valid convolutions: contributions `(k_i - 1)` sum to
/// `level - 1`. Channel multipliers follow the discriminator recipes.
pub fn receptive_field_stack(level: usize) -> Result<Vec<(usize, usize)>> {
    let stack: Vec<(usize, usize)> = match level {
        1 => vec![],
        2 => vec![(2, 1)],
        4 => vec![(4, 2)],
        8 => vec![(4, 1), (3, 2), (3, 4)],
        16 => vec![(4, 1), (3, 2), (3, 4), (5, 4), (5, 8)],
        32 => vec![(4, 1), (3, 2), (3, 4), (5, 4), (5, 8), (9, 8), (9, 8)],
        _ => {
            return Err(Error::invalid(format!(
                "no receptive-field recipe for level {level}"
            )))
        }
    };
    debug_assert_eq!(
        1 + stack.iter().map(|(k, _)| k - 1).sum::<usize>(),
        level.max(1)
    );
    Ok(stack)
}

/// Channel multiplier of the 1x1 head after the spatial stack.
fn head_multiplier(level: usize) -> usize {
    match level {
        1 | 2 => 2,
        4 => 4,
        _ => 8,
    }
}

const STDDEV_FEATURES: usize = 4;
/// Batch-statistics channels follow at most the first three spatial convs.
const STDDEV_LAYERS: usize = 3;

/// Patch discriminator for `level x level` windows of `side`-sized images.
/// Input is the image concatenated with a 2-channel coordinate map
/// (`channels + 2` input channels); output is one sigmoid score per window.
/// Spectral normalization on every layer except the output convolution.
pub fn build_discriminator(
    level: usize,
    side: usize,
    channels: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Net> {
    if level < 2 || level > side {
        return Err(Error::invalid(format!(
            "discriminator level {level} out of range for side {side}"
        )));
    }
    let stack = receptive_field_stack(level)?;
    let mut ops = Vec::new();
    let mut c_in = channels + 2;
    for (i, &(k, mult)) in stack.iter().enumerate() {
        let c_out = mult * width;
        ops.push(Op::Conv(Conv2d::new(c_in, c_out, k, k, 1, 0, Init::KaimingLrelu, true, rng)));
        ops.push(Op::Act(Activation::LeakyRelu));
        c_in = c_out;
        if i < STDDEV_LAYERS {
            ops.push(Op::MinibatchStddev { features: STDDEV_FEATURES });
            c_in += STDDEV_FEATURES;
        }
    }
    let head = head_multiplier(level) * width;
    ops.push(Op::Conv(Conv2d::new(c_in, head, 1, 1, 1, 0, Init::KaimingLrelu, true, rng)));
    ops.push(Op::Act(Activation::LeakyRelu));
    for b in 0..2 {
        push_res_block(&mut ops, head, 100 + b, true, None, rng);
    }
    ops.push(Op::Conv(Conv2d::new(head, 1, 1, 1, 1, 0, Init::Xavier, false, rng)));
    ops.push(Op::Act(Activation::Sigmoid));
    Ok(Net::new(ops))
}

/// Pre-activation residual block of two 1x1 convolutions. `dropout` adds a
/// dropout between the convolutions (detector variant).
pub fn push_res_block(
    ops: &mut Vec<Op>,
    ch: usize,
    tag: usize,
    spectral_norm: bool,
    dropout: Option<f64>,
    rng: &mut ChaCha8Rng,
) {
    ops.push(Op::SaveSkip { tag });
    ops.push(Op::Act(Activation::LeakyRelu));
    ops.push(Op::Conv(Conv2d::new(ch, ch, 1, 1, 1, 0, Init::KaimingLrelu, spectral_norm, rng)));
    ops.push(Op::Act(Activation::LeakyRelu));
    if let Some(rate) = dropout {
        ops.push(Op::Dropout { rate });
    }
    ops.push(Op::Conv(Conv2d::new(ch, ch, 1, 1, 1, 0, Init::KaimingLrelu, spectral_norm, rng)));
    ops.push(Op::AddSkip { tag });
}

fn enc_channels(k: usize, width: usize) -> usize {
    (width << k).min(4 * width)
}

/// Encoder-decoder generator: noise of the image shape in, image out.
/// Strided 4x4 encoder convs down to 4x4, a dense bottleneck, then bilinear
/// upsampling with skip concatenations back to full resolution; batch norm
/// everywhere except the Tanh output layer.
pub fn build_generator(
    side: usize,
    channels: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Net> {
    if side < 8 || !side.is_power_of_two() {
        return Err(Error::invalid(format!(
            "generator needs a power-of-two side of at least 8, got {side}"
        )));
    }
    let n_down = (side.trailing_zeros() as usize) - 2; // downsample to 4x4
    let bottleneck = 8 * width;
    let mut ops = Vec::new();
    let mut c_in = channels;
    for k in 0..n_down {
        let c_out = enc_channels(k, width);
        ops.push(Op::Conv(Conv2d::new(c_in, c_out, 4, 4, 2, 1, Init::KaimingLrelu, false, rng)));
        ops.push(Op::BatchNorm(BatchNorm2d::new(c_out)));
        ops.push(Op::Act(Activation::LeakyRelu));
        ops.push(Op::Conv(Conv2d::new(c_out, c_out, 1, 1, 1, 0, Init::KaimingLrelu, false, rng)));
        ops.push(Op::BatchNorm(BatchNorm2d::new(c_out)));
        ops.push(Op::Act(Activation::LeakyRelu));
        ops.push(Op::SaveSkip { tag: k });
        c_in = c_out;
    }
    ops.push(Op::Conv(Conv2d::new(c_in, bottleneck, 4, 4, 1, 0, Init::KaimingLrelu, false, rng)));
    ops.push(Op::BatchNorm(BatchNorm2d::new(bottleneck)));
    ops.push(Op::Act(Activation::LeakyRelu));
    let deep = enc_channels(n_down - 1, width);
    ops.push(Op::Flatten);
    ops.push(Op::Dense(Dense::new(bottleneck, deep * 16, Init::KaimingLrelu, false, rng)));
    ops.push(Op::Unflatten { c: deep, h: 4, w: 4 });
    ops.push(Op::BatchNorm(BatchNorm2d::new(deep)));
    ops.push(Op::Act(Activation::LeakyRelu));
    let mut cur = deep;
    for k in (0..n_down).rev() {
        ops.push(Op::ConcatSkip { tag: k });
        cur += enc_channels(k, width);
        ops.push(Op::Upsample2x);
        let c_out = if k >= 1 { enc_channels(k - 1, width) } else { width };
        ops.push(Op::Conv(Conv2d::new(cur, c_out, 3, 3, 1, 1, Init::KaimingLrelu, false, rng)));
        ops.push(Op::BatchNorm(BatchNorm2d::new(c_out)));
        ops.push(Op::Act(Activation::LeakyRelu));
        if k >= 1 {
            ops.push(Op::Conv(Conv2d::new(c_out, c_out, 1, 1, 1, 0, Init::KaimingLrelu, false, rng)));
            ops.push(Op::BatchNorm(BatchNorm2d::new(c_out)));
            ops.push(Op::Act(Activation::LeakyRelu));
        } else {
            ops.push(Op::Conv(Conv2d::new(c_out, channels, 1, 1, 1, 0, Init::Xavier, false, rng)));
            ops.push(Op::Act(Activation::Tanh));
        }
        cur = c_out;
    }
    Ok(Net::new(ops))
}

/// Statistics network: takes `concat(z, g(z))` (twice the image channels)
/// and produces one scalar per sample through a conv stack and a multi-scale
/// average-pooling pyramid.
pub fn build_statistics_net(
    side: usize,
    channels: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Net> {
    if side < 8 {
        return Err(Error::invalid("statistics net needs side of at least 8"));
    }
    let c1 = width;
    let c2 = 2 * width;
    let hidden = 2 * width;
    let scales = vec![1, 2, 4];
    let pooled: usize = scales.iter().map(|k| c2 * k * k).sum();
    let ops = vec![
        Op::Conv(Conv2d::new(2 * channels, c1, 3, 3, 2, 1, Init::KaimingLrelu, false, rng)),
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(c1, c2, 3, 3, 2, 1, Init::KaimingLrelu, false, rng)),
        Op::Act(Activation::LeakyRelu),
        Op::Conv(Conv2d::new(c2, c2, 3, 3, 1, 1, Init::KaimingLrelu, false, rng)),
        Op::Act(Activation::LeakyRelu),
        Op::PyramidPool { scales },
        Op::Dense(Dense::new(pooled, hidden, Init::KaimingLrelu, false, rng)),
        Op::Act(Activation::LeakyRelu),
        Op::Dense(Dense::new(hidden, 1, Init::Xavier, false, rng)),
    ];
    Ok(Net::new(ops))
}

/// True iff every convolution after op `start` has a 1x1 kernel.
pub fn all_kernels_after_are_1x1(desc: &[OpDesc], start: usize) -> bool {
    desc.iter().skip(start + 1).all(|d| match d {
        OpDesc::Conv { kernel, .. } => *kernel == (1, 1),
        _ => true,
    })
}

//! Entropy-regularized patch GANs realizing the level-w approximations for
//! w >= 2: a generator trained adversarially against a stride-1 patch
//! discriminator, with the generator's output entropy pushed up through a
//! mutual-information lower bound whose gradient is clipped so it never
//! overwhelms the adversarial term.

pub mod losses;
pub mod nets;

use std::collections::HashMap;
use std::path::Path;

use ndarray::{concatenate, s, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mlsad_nn::{Adam, Net};

use crate::error::{Error, Result};
use crate::mrf::SourceSampler;
use crate::types::{make_true_coordinate_map, streams, ImageTensor, RandomSource};

/// Hyperparameters for one level's GAN. Defaults are the reference recipe:
/// Adam with (lr_d, lr_g, lr_t) = (4e-4, 1e-4, 4e-4), betas (0, 0.9),
/// batch 32, 300 epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub level: usize,
    pub image_side: usize,
    pub channels: usize,
    pub width: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_t: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl GanConfig {
    pub fn for_level(level: usize, image_side: usize, channels: usize) -> Self {
        Self {
            level,
            image_side,
            channels,
            width: 64,
            batch_size: 32,
            epochs: 300,
            lr_d: 4e-4,
            lr_g: 1e-4,
            lr_t: 4e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
        }
    }
}

/// Per-step training metrics.
#[derive(Debug, Clone, Copy)]
pub struct GanStepMetrics {
    pub disc_loss: f64,
    pub gen_adv_loss: f64,
    pub mi_estimate: f64,
    pub beta: f64,
}

/// Averaged metrics over one epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct GanEpochStats {
    pub disc_loss: f64,
    pub gen_adv_loss: f64,
    pub mi_estimate: f64,
    pub beta: f64,
    pub steps: usize,
}

/// Everything needed to train and sample one level's generator.
pub struct GanTrainState {
    pub config: GanConfig,
    pub generator: Net,
    pub discriminator: Net,
    pub statistics: Net,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_t: Adam,
    pub epoch: usize,
    pub seed: u64,
    noise_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    forward_rng: ChaCha8Rng,
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

impl GanTrainState {
    pub fn init(config: GanConfig, source: &RandomSource) -> Result<Self> {
        let mut init_rng = source.stream(streams::for_level(streams::GAN_INIT, config.level));
        let generator =
            nets::build_generator(config.image_side, config.channels, config.width, &mut init_rng)?;
        let discriminator = nets::build_discriminator(
            config.level,
            config.image_side,
            config.channels,
            config.width,
            &mut init_rng,
        )?;
        let statistics =
            nets::build_statistics_net(config.image_side, config.channels, config.width, &mut init_rng)?;
        Ok(Self {
            opt_g: Adam::new(config.lr_g, config.adam_beta1, config.adam_beta2, 0.0),
            opt_d: Adam::new(config.lr_d, config.adam_beta1, config.adam_beta2, 0.0),
            opt_t: Adam::new(config.lr_t, config.adam_beta1, config.adam_beta2, 0.0),
            generator,
            discriminator,
            statistics,
            epoch: 0,
            seed: source.seed,
            noise_rng: source.stream(streams::for_level(streams::GAN_NOISE, config.level)),
            data_rng: source.stream(streams::for_level(streams::GAN_DATA, config.level)),
            forward_rng: source.stream(streams::for_level(streams::GAN_NOISE, config.level) + 1),
            config,
        })
    }

    fn sample_noise(&mut self, n: usize) -> Array4<f64> {
        let c = self.config.channels;
        let side = self.config.image_side;
        let rng = &mut self.noise_rng;
        Array4::from_shape_simple_fn((n, c, side, side), || rng.random_range(-1.0..=1.0))
    }

    /// One alternating update: discriminator, statistics network, then the
    /// generator on `adv - beta * mi` with beta from the gradient-norm clip.
    pub fn train_step(&mut self, real: &ImageTensor) -> Result<GanStepMetrics> {
        let b = real.batch();
        if b < 2 {
            return Err(Error::invalid("GAN step needs a batch of at least 2"));
        }
        let c = self.config.channels;
        let x_real = real.to_nchw();
        let coords = make_true_coordinate_map(self.config.image_side, self.config.image_side, b)?
            .to_nchw();
        let z = self.sample_noise(b);

        // One train-mode generator pass reused by every sub-step.
        let (fake, g_tape) = self.generator.forward_train(&z, &[], &mut self.forward_rng);

        // Discriminator update.
        let d_in_real = concatenate(Axis(1), &[x_real.view(), coords.view()]).unwrap();
        let d_in_fake = concatenate(Axis(1), &[fake.view(), coords.view()]).unwrap();
        self.discriminator.zero_grads();
        let (d_real, tape_r) = self.discriminator.forward_train(&d_in_real, &[], &mut self.forward_rng);
        let (d_fake, tape_f) = self.discriminator.forward_train(&d_in_fake, &[], &mut self.forward_rng);
        let d_loss = check_finite("disc_loss", losses::disc_loss(&d_real, &d_fake)?)?;
        let (gr, gf) = losses::disc_loss_grads(&d_real, &d_fake);
        self.discriminator.backward(&tape_r, &gr);
        self.discriminator.backward(&tape_f, &gf);
        let mut d_params = self.discriminator.params_mut();
        self.opt_d.step(&mut d_params);
        drop(d_params);

        // Statistics-network update: push the bound up.
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..b).collect();
            p.shuffle(&mut self.data_rng);
            p
        };
        let z_perm = z.select(Axis(0), &perm);
        let t_in_joint = concatenate(Axis(1), &[z.view(), fake.view()]).unwrap();
        let t_in_prod = concatenate(Axis(1), &[z_perm.view(), fake.view()]).unwrap();
        self.statistics.zero_grads();
        let (t_j, tape_j) = self.statistics.forward_train(&t_in_joint, &[], &mut self.forward_rng);
        let (t_p, tape_p) = self.statistics.forward_train(&t_in_prod, &[], &mut self.forward_rng);
        let tj: Vec<f64> = t_j.iter().copied().collect();
        let tp: Vec<f64> = t_p.iter().copied().collect();
        let mi = check_finite("mi_estimate", losses::mi_lower_bound(&tj, &tp)?)?;
        let (gj, gp) = losses::mi_lower_bound_grads(&tj, &tp);
        let gj_t = Array4::from_shape_vec((b, 1, 1, 1), gj.iter().map(|v| -v).collect()).unwrap();
        let gp_t = Array4::from_shape_vec((b, 1, 1, 1), gp.iter().map(|v| -v).collect()).unwrap();
        self.statistics.backward(&tape_j, &gj_t);
        self.statistics.backward(&tape_p, &gp_t);
        let mut t_params = self.statistics.params_mut();
        self.opt_t.step(&mut t_params);
        drop(t_params);

        // Generator update: adversarial gradient and entropy gradient from
        // two separate backward passes through the same generator tape.
        let (d_fake2, tape_f2) = self.discriminator.forward_train(&d_in_fake, &[], &mut self.forward_rng);
        let g_adv_loss = check_finite("gen_adv_loss", losses::gen_adv_loss(&d_fake2))?;
        let g_map = losses::gen_adv_loss_grad(&d_fake2);
        let dx_full = self.discriminator.backward(&tape_f2, &g_map);
        let dx_adv = dx_full.slice(s![.., ..c, .., ..]).to_owned();
        self.generator.zero_grads();
        self.generator.backward(&g_tape, &dx_adv);
        let adv_norm = self.generator.grad_norm();
        let g_adv = self.generator.take_grads();

        let (t_j2, tape_j2) = self.statistics.forward_train(&t_in_joint, &[], &mut self.forward_rng);
        let (t_p2, tape_p2) = self.statistics.forward_train(&t_in_prod, &[], &mut self.forward_rng);
        let tj2: Vec<f64> = t_j2.iter().copied().collect();
        let tp2: Vec<f64> = t_p2.iter().copied().collect();
        let (gj2, gp2) = losses::mi_lower_bound_grads(&tj2, &tp2);
        let gj2_t = Array4::from_shape_vec((b, 1, 1, 1), gj2).unwrap();
        let gp2_t = Array4::from_shape_vec((b, 1, 1, 1), gp2).unwrap();
        let dj = self.statistics.backward(&tape_j2, &gj2_t);
        let dp = self.statistics.backward(&tape_p2, &gp2_t);
        let dx_mi =
            (&dj.slice(s![.., c.., .., ..]) + &dp.slice(s![.., c.., .., ..])).to_owned();
        self.generator.backward(&g_tape, &dx_mi);
        let mi_norm = self.generator.grad_norm();
        let g_mi = self.generator.take_grads();

        if !adv_norm.is_finite() || !mi_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norms adv={adv_norm} mi={mi_norm}"
            )));
        }
        let beta = losses::beta_schedule(adv_norm, mi_norm);
        let total: Vec<_> = g_adv
            .iter()
            .zip(g_mi.iter())
            .map(|(a, m)| a - &(m * beta))
            .collect();
        self.generator.set_grads(&total);
        let mut g_params = self.generator.params_mut();
        self.opt_g.step(&mut g_params);
        drop(g_params);

        Ok(GanStepMetrics {
            disc_loss: d_loss,
            gen_adv_loss: g_adv_loss,
            mi_estimate: mi,
            beta,
        })
    }

    /// One pass over the dataset in shuffled minibatches.
    pub fn train_epoch(&mut self, dataset: &ImageTensor) -> Result<GanEpochStats> {
        let n = dataset.batch();
        if n < 2 {
            return Err(Error::invalid("GAN training needs at least 2 images"));
        }
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut self.data_rng);
        let mut stats = GanEpochStats::default();
        for chunk in indices.chunks(self.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = dataset.select(chunk);
            let m = self.train_step(&batch)?;
            stats.disc_loss += m.disc_loss;
            stats.gen_adv_loss += m.gen_adv_loss;
            stats.mi_estimate += m.mi_estimate;
            stats.beta += m.beta;
            stats.steps += 1;
        }
        if stats.steps > 0 {
            let k = stats.steps as f64;
            stats.disc_loss /= k;
            stats.gen_adv_loss /= k;
            stats.mi_estimate /= k;
            stats.beta /= k;
        }
        self.epoch += 1;
        Ok(stats)
    }

    /// Deterministic sampling from the trained generator: `n` images in
    /// `[-1, 1]` (Tanh output), identical for identical rng states.
    pub fn sample(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        if self.epoch == 0 {
            return Err(Error::missing(format!(
                "generator for level {} has not been trained",
                self.config.level
            )));
        }
        let c = self.config.channels;
        let side = self.config.image_side;
        if n == 0 {
            return Ok(ImageTensor::new_unchecked(Array4::zeros((0, side, side, c))));
        }
        let z = Array4::from_shape_simple_fn((n, c, side, side), || rng.random_range(-1.0..=1.0));
        let (y, _) = self.generator.forward_eval(&z, &[]);
        Ok(ImageTensor::from_nchw(&y))
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, t) in self.generator.state_tensors() {
            tensors.push((format!("g.{name}"), t));
        }
        for (name, t) in self.discriminator.state_tensors() {
            tensors.push((format!("d.{name}"), t));
        }
        for (name, t) in self.statistics.state_tensors() {
            tensors.push((format!("t.{name}"), t));
        }
        let g_names: Vec<String> = self.generator.params_mut().iter().map(|(n, _)| n.clone()).collect();
        let d_names: Vec<String> = self.discriminator.params_mut().iter().map(|(n, _)| n.clone()).collect();
        let t_names: Vec<String> = self.statistics.params_mut().iter().map(|(n, _)| n.clone()).collect();
        for (n, t) in self.opt_g.state_tensors(&g_names) {
            tensors.push((format!("g.{n}"), t));
        }
        for (n, t) in self.opt_d.state_tensors(&d_names) {
            tensors.push((format!("d.{n}"), t));
        }
        for (n, t) in self.opt_t.state_tensors(&t_names) {
            tensors.push((format!("t.{n}"), t));
        }
        let meta = serde_json::json!({
            "kind": "gan",
            "level": self.config.level,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?,
            "adam_t": [self.opt_g.t, self.opt_d.t, self.opt_t.t],
            "rng": {
                "noise": rng_state(&self.noise_rng),
                "data": rng_state(&self.data_rng),
                "forward": rng_state(&self.forward_rng),
            },
        });
        mlsad_nn::checkpoint::save(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = mlsad_nn::checkpoint::load(path)?;
        if meta["kind"] != "gan" {
            return Err(Error::Format(format!(
                "{} is not a generator checkpoint",
                path.display()
            )));
        }
        let config: GanConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("bad config in checkpoint: {e}")))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut state = Self::init(config, &RandomSource::new(seed))?;
        state.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        let strip = |prefix: &str| -> HashMap<String, ndarray::ArrayD<f64>> {
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), v.clone())))
                .collect()
        };
        state.generator.load_state(&strip("g."))?;
        state.discriminator.load_state(&strip("d."))?;
        state.statistics.load_state(&strip("t."))?;
        let g_names: Vec<String> = state.generator.params_mut().iter().map(|(n, _)| n.clone()).collect();
        let d_names: Vec<String> = state.discriminator.params_mut().iter().map(|(n, _)| n.clone()).collect();
        let t_names: Vec<String> = state.statistics.params_mut().iter().map(|(n, _)| n.clone()).collect();
        state.opt_g.load_state(&g_names, &strip("g."));
        state.opt_d.load_state(&d_names, &strip("d."));
        state.opt_t.load_state(&t_names, &strip("t."));
        if let Some(ts) = meta["adam_t"].as_array() {
            state.opt_g.t = ts[0].as_u64().unwrap_or(0);
            state.opt_d.t = ts[1].as_u64().unwrap_or(0);
            state.opt_t.t = ts[2].as_u64().unwrap_or(0);
        }
        restore_rng(&mut state.noise_rng, &meta["rng"]["noise"]);
        restore_rng(&mut state.data_rng, &meta["rng"]["data"]);
        restore_rng(&mut state.forward_rng, &meta["rng"]["forward"]);
        Ok(state)
    }
}

fn rng_state(rng: &ChaCha8Rng) -> serde_json::Value {
    serde_json::json!({
        "stream": rng.get_stream(),
        "word_pos": rng.get_word_pos().to_string(),
    })
}

fn restore_rng(rng: &mut ChaCha8Rng, v: &serde_json::Value) {
    if let (Some(stream), Some(pos)) = (v["stream"].as_u64(), v["word_pos"].as_str()) {
        rng.set_stream(stream);
        if let Ok(p) = pos.parse::<u128>() {
            rng.set_word_pos(p);
        }
    }
}

/// Train a generator for one level on a dataset of normal images.
pub fn train_generator(
    config: GanConfig,
    dataset: &ImageTensor,
    source: &RandomSource,
    mut on_epoch: impl FnMut(usize, &GanEpochStats),
) -> Result<GanTrainState> {
    if dataset.is_empty() {
        return Err(Error::invalid("GAN training dataset is empty"));
    }
    let epochs = config.epochs;
    let mut state = GanTrainState::init(config, source)?;
    for e in 0..epochs {
        let stats = state.train_epoch(dataset)?;
        on_epoch(e, &stats);
    }
    Ok(state)
}

/// Sample `n` images from a trained level-w generator.
pub fn sample_levelw(state: &mut GanTrainState, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    state.sample(n, rng)
}

/// Adapter presenting a trained generator as a level source for detector
/// training.
pub struct GeneratorSampler {
    pub state: GanTrainState,
}

impl SourceSampler for GeneratorSampler {
    fn level(&self) -> usize {
        self.state.config.level
    }

    fn sample(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        self.state.sample(n, rng)
    }
}

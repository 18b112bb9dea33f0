//! Level-specific patch detectors: stride-1 fully convolutional networks
//! with an exact `s x s` receptive field, coordinate channels injected at an
//! intermediate layer (everything after it is 1x1), and a three-pair
//! contrastive objective over the normal pair, the position-anomaly pair
//! (true image, randomized coordinates), and the structure-anomaly pair
//! (source-level sample, true coordinates).

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mlsad_nn::layers::{Activation, Conv2d};
use mlsad_nn::net::{Net, Op};
use mlsad_nn::{Adam, Init};

use crate::error::{Error, Result};
use crate::mrf::SourceSampler;
use crate::patchgan::nets::{all_kernels_after_are_1x1, push_res_block, receptive_field_stack};
use crate::types::{
    make_fake_coordinate_map, make_true_coordinate_map, patch_grid_for, streams,
    true_coordinate_map_window, CoordinateMap, ImageTensor, RandomSource,
};

pub use loss::{contrastive_loss, contrastive_loss_grads, contrastive_terms};

mod loss;

/// Hyperparameters for one level's detector. `alpha1`/`alpha2` weight the
/// position- and structure-anomaly terms; the reference values are 0.6 and
/// 0.4 for every level and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub level: usize,
    pub image_side: usize,
    pub channels: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Std-dev of the train-only Gaussian input noise (variance 0.05).
    pub input_noise_std: f64,
    pub dropout: f64,
}

impl DetectorConfig {
    /// Schedule for digit/texture-like datasets: one residual block, weight
    /// decay 1e-3, 100 epochs with x0.3 decays at 50 and 75.
    pub fn mnist_like(level: usize, image_side: usize, channels: usize) -> Self {
        Self {
            level,
            image_side,
            channels,
            width: 64,
            num_blocks: 1,
            alpha1: 0.6,
            alpha2: 0.4,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 1e-3,
            batch_size: 8,
            epochs: 100,
            lr_decay_epochs: vec![50, 75],
            lr_decay_factor: 0.3,
            input_noise_std: 0.05f64.sqrt(),
            dropout: 0.3,
        }
    }

    /// Schedule for natural-object datasets: two residual blocks, weight
    /// decay 1e-4, 250 epochs with x0.3 decays at 100 and 200.
    pub fn cifar_like(level: usize, image_side: usize, channels: usize) -> Self {
        Self {
            num_blocks: 2,
            weight_decay: 1e-4,
            epochs: 250,
            lr_decay_epochs: vec![100, 200],
            ..Self::mnist_like(level, image_side, channels)
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_side - self.level + 1
    }
}

/// Build the detector network. Returns the net and the op index of the
/// coordinate-injection point; every convolution after it is 1x1.
/// No normalization layers anywhere.
pub fn build_detector(config: &DetectorConfig, rng: &mut ChaCha8Rng) -> Result<(Net, usize)> {
    if config.level > config.image_side {
        return Err(Error::invalid(format!(
            "detector level {} exceeds image side {}",
            config.level, config.image_side
        )));
    }
    let stack = receptive_field_stack(config.level)?;
    let width = config.width;
    let mut ops = Vec::new();
    ops.push(Op::GaussNoise { std: config.input_noise_std });
    let mut c_in = config.channels;
    if stack.is_empty() {
        // pixel-level detector: 1x1 features only
        ops.push(Op::Conv(Conv2d::new(c_in, width, 1, 1, 1, 0, Init::KaimingLrelu, false, rng)));
        ops.push(Op::Act(Activation::LeakyRelu));
        c_in = width;
    }
    for &(k, _) in &stack {
        ops.push(Op::Conv(Conv2d::new(c_in, width, k, k, 1, 0, Init::KaimingLrelu, false, rng)));
        ops.push(Op::Act(Activation::LeakyRelu));
        c_in = width;
    }
    let injection = ops.len();
    ops.push(Op::ConcatExtern { slot: 0 });
    c_in += 2;
    let head = 2 * width;
    ops.push(Op::Conv(Conv2d::new(c_in, head, 1, 1, 1, 0, Init::KaimingLrelu, false, rng)));
    ops.push(Op::Act(Activation::LeakyRelu));
    for b in 0..config.num_blocks {
        push_res_block(&mut ops, head, 200 + b, false, Some(config.dropout), rng);
    }
    ops.push(Op::Conv(Conv2d::new(head, 1, 1, 1, 1, 0, Init::Xavier, false, rng)));
    ops.push(Op::Act(Activation::Sigmoid));
    let net = Net::new(ops);
    debug_assert!(all_kernels_after_are_1x1(&net.describe(), injection));
    Ok((net, injection))
}

/// A detector with its optimizer and training bookkeeping.
pub struct DetectorTrainState {
    pub config: DetectorConfig,
    pub net: Net,
    pub injection_index: usize,
    pub opt: Adam,
    pub epoch: usize,
    pub seed: u64,
    data_rng: ChaCha8Rng,
    coord_rng: ChaCha8Rng,
    forward_rng: ChaCha8Rng,
    source_rng: ChaCha8Rng,
}

/// Per-epoch training stats.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetectorEpochStats {
    pub loss: f64,
    pub steps: usize,
}

impl DetectorTrainState {
    pub fn init(config: DetectorConfig, source: &RandomSource) -> Result<Self> {
        let lvl = config.level;
        let mut init_rng = source.stream(streams::for_level(streams::DET_INIT, lvl));
        let (net, injection_index) = build_detector(&config, &mut init_rng)?;
        Ok(Self {
            opt: Adam::new(config.lr, config.adam_beta1, config.adam_beta2, config.weight_decay),
            net,
            injection_index,
            epoch: 0,
            seed: source.seed,
            data_rng: source.stream(streams::for_level(streams::DET_DATA, lvl)),
            coord_rng: source.stream(streams::for_level(streams::DET_FAKE_COORDS, lvl)),
            forward_rng: source.stream(streams::for_level(streams::DET_FORWARD, lvl)),
            source_rng: source.stream(streams::for_level(streams::DET_SOURCE, lvl)),
            config,
        })
    }

    /// Deterministic eval-mode score map over all `s x s` windows,
    /// `(batch, grid, grid)` with values in (0, 1).
    pub fn forward(&mut self, x: &ImageTensor, coords: &CoordinateMap) -> Result<Array4<f64>> {
        let grid = patch_grid_for(self.config.image_side, self.config.level)?;
        let g = grid.grid_side();
        if coords.grid() != (g, g) {
            return Err(Error::invalid(format!(
                "coordinate grid {:?} does not match detector grid {g}x{g}",
                coords.grid()
            )));
        }
        if x.side() != self.config.image_side {
            return Err(Error::invalid(format!(
                "image side {} does not match detector side {}",
                x.side(),
                self.config.image_side
            )));
        }
        if x.batch() != coords.batch() {
            return Err(Error::invalid("image and coordinate batch sizes differ"));
        }
        let (y, _) = self.net.forward_eval(&x.to_nchw(), &[&coords.to_nchw()]);
        Ok(y)
    }

    fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = self.config.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.config.lr * self.config.lr_decay_factor.powi(decays as i32)
    }

    /// One training step on a batch of normal images. The same image batch
    /// feeds the normal and position pairs; the structure pair draws from
    /// the source-level sampler.
    pub fn train_step(
        &mut self,
        x: &ImageTensor,
        sampler: &mut dyn SourceSampler,
    ) -> Result<f64> {
        let b = x.batch();
        if b == 0 {
            return Err(Error::invalid("empty training batch"));
        }
        let expected_source = self.config.level / 2;
        if sampler.level() != expected_source {
            return Err(Error::missing(format!(
                "detector level {} needs a level-{} source, got level {}",
                self.config.level,
                expected_source,
                sampler.level()
            )));
        }
        let g = self.config.grid_side();
        let r_true = make_true_coordinate_map(g, g, b)?.to_nchw();
        let r_fake = make_fake_coordinate_map(g, g, b, &mut self.coord_rng)?.to_nchw();
        let xhat = sampler.sample(b, &mut self.source_rng)?;
        if xhat.side() != x.side() {
            return Err(Error::invalid("source sample size mismatch"));
        }
        let x_n = x.to_nchw();
        let xh_n = xhat.to_nchw();

        let (a_n, tape_n) = self.net.forward_train(&x_n, &[&r_true], &mut self.forward_rng);
        let (a_p, tape_p) = self.net.forward_train(&x_n, &[&r_fake], &mut self.forward_rng);
        let (a_s, tape_s) = self.net.forward_train(&xh_n, &[&r_true], &mut self.forward_rng);
        let alpha1 = self.config.alpha1;
        let alpha2 = self.config.alpha2;
        let l = contrastive_loss(&a_n, &a_p, &a_s, alpha1, alpha2)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("contrastive loss = {l}")));
        }
        let (gn, gp, gs) = contrastive_loss_grads(&a_n, &a_p, &a_s, alpha1, alpha2);
        self.net.zero_grads();
        self.net.backward(&tape_n, &gn);
        self.net.backward(&tape_p, &gp);
        self.net.backward(&tape_s, &gs);
        self.opt.lr = self.lr_for_epoch(self.epoch);
        let mut params = self.net.params_mut();
        self.opt.step(&mut params);
        drop(params);
        Ok(l)
    }

    /// One pass over the dataset in shuffled minibatches.
    pub fn train_epoch(
        &mut self,
        dataset: &ImageTensor,
        sampler: &mut dyn SourceSampler,
    ) -> Result<DetectorEpochStats> {
        let n = dataset.batch();
        if n == 0 {
            return Err(Error::invalid("empty detector training dataset"));
        }
        let mut indices: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), &mut self.data_rng);
        let mut stats = DetectorEpochStats::default();
        for chunk in indices.chunks(self.config.batch_size) {
            let batch = dataset.select(chunk);
            stats.loss += self.train_step(&batch, sampler)?;
            stats.steps += 1;
        }
        if stats.steps > 0 {
            stats.loss /= stats.steps as f64;
        }
        self.epoch += 1;
        Ok(stats)
    }

    /// Crop-based step for large images: one random crop position per batch
    /// element, applied to both the normal image and the source sample, with
    /// true coordinates taken from the crop's window of the full-image grid.
    pub fn train_step_on_crops(
        &mut self,
        x_full: &ImageTensor,
        sampler: &mut dyn SourceSampler,
        crop_side: usize,
    ) -> Result<f64> {
        let full_side = x_full.side();
        if crop_side > full_side {
            return Err(Error::invalid(format!(
                "crop {crop_side} larger than image {full_side}"
            )));
        }
        if crop_side != self.config.image_side {
            return Err(Error::invalid(format!(
                "crop {crop_side} does not match detector input {}",
                self.config.image_side
            )));
        }
        let b = x_full.batch();
        if b == 0 {
            return Err(Error::invalid("empty training batch"));
        }
        let s_lvl = self.config.level;
        let full_grid = full_side - s_lvl + 1;
        let g = crop_side - s_lvl + 1;
        let xhat_full = sampler.sample(b, &mut self.source_rng)?;
        if xhat_full.side() != full_side {
            return Err(Error::invalid("source sample size mismatch"));
        }
        let max_corner = full_side - crop_side;
        let mut x_crop = Array4::zeros((b, crop_side, crop_side, x_full.channels()));
        let mut xh_crop = Array4::zeros((b, crop_side, crop_side, x_full.channels()));
        let mut r_true = Array4::zeros((b, g, g, 2));
        for bi in 0..b {
            let top = self.data_rng.random_range(0..=max_corner);
            let left = self.data_rng.random_range(0..=max_corner);
            x_crop.slice_mut(s![bi, .., .., ..]).assign(&x_full.data().slice(s![
                bi,
                top..top + crop_side,
                left..left + crop_side,
                ..
            ]));
            xh_crop.slice_mut(s![bi, .., .., ..]).assign(&xhat_full.data().slice(s![
                bi,
                top..top + crop_side,
                left..left + crop_side,
                ..
            ]));
            let win = true_coordinate_map_window(full_grid, full_grid, top, left, g, g, 1)?;
            r_true.slice_mut(s![bi, .., .., ..]).assign(&win.data.index_axis(Axis(0), 0));
        }
        let r_true = r_true.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
        let r_fake = make_fake_coordinate_map(g, g, b, &mut self.coord_rng)?.to_nchw();
        let x_n = x_crop.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();
        let xh_n = xh_crop.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned();

        let (a_n, tape_n) = self.net.forward_train(&x_n, &[&r_true], &mut self.forward_rng);
        let (a_p, tape_p) = self.net.forward_train(&x_n, &[&r_fake], &mut self.forward_rng);
        let (a_s, tape_s) = self.net.forward_train(&xh_n, &[&r_true], &mut self.forward_rng);
        let alpha1 = self.config.alpha1;
        let alpha2 = self.config.alpha2;
        let l = contrastive_loss(&a_n, &a_p, &a_s, alpha1, alpha2)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("contrastive loss = {l}")));
        }
        let (gn, gp, gs) = contrastive_loss_grads(&a_n, &a_p, &a_s, alpha1, alpha2);
        self.net.zero_grads();
        self.net.backward(&tape_n, &gn);
        self.net.backward(&tape_p, &gp);
        self.net.backward(&tape_s, &gs);
        self.opt.lr = self.lr_for_epoch(self.epoch);
        let mut params = self.net.params_mut();
        self.opt.step(&mut params);
        drop(params);
        Ok(l)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut tensors = self.net.state_tensors();
        let names: Vec<String> = self.net.params_mut().iter().map(|(n, _)| n.clone()).collect();
        tensors.extend(self.opt.state_tensors(&names));
        let meta = serde_json::json!({
            "kind": "detector",
            "level": self.config.level,
            "epoch": self.epoch,
            "seed": self.seed,
            "injection_index": self.injection_index,
            "adam_t": self.opt.t,
            "config": serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?,
        });
        mlsad_nn::checkpoint::save(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = mlsad_nn::checkpoint::load(path)?;
        if meta["kind"] != "detector" {
            return Err(Error::Format(format!(
                "{} is not a detector checkpoint",
                path.display()
            )));
        }
        let config: DetectorConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("bad config in checkpoint: {e}")))?;
        let seed = meta["seed"].as_u64().unwrap_or(0);
        let mut state = Self::init(config, &RandomSource::new(seed))?;
        state.epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        state.opt.t = meta["adam_t"].as_u64().unwrap_or(0);
        let map: HashMap<String, ndarray::ArrayD<f64>> = tensors.into_iter().collect();
        state.net.load_state(&map)?;
        let names: Vec<String> = state.net.params_mut().iter().map(|(n, _)| n.clone()).collect();
        state.opt.load_state(&names, &map);
        Ok(state)
    }
}

/// Train one detector for its configured number of epochs.
pub fn train_detector(
    config: DetectorConfig,
    dataset: &ImageTensor,
    sampler: &mut dyn SourceSampler,
    source: &RandomSource,
    mut on_epoch: impl FnMut(usize, &DetectorEpochStats),
) -> Result<DetectorTrainState> {
    if dataset.is_empty() {
        return Err(Error::invalid("detector training dataset is empty"));
    }
    let epochs = config.epochs;
    let mut state = DetectorTrainState::init(config, source)?;
    for e in 0..epochs {
        let stats = state.train_epoch(dataset, sampler)?;
        on_epoch(e, &stats);
    }
    Ok(state)
}

/// Crop-trained variant for images larger than the detector input.
pub fn train_detector_on_crops(
    config: DetectorConfig,
    large_dataset: &ImageTensor,
    crop_side: usize,
    sampler: &mut dyn SourceSampler,
    source: &RandomSource,
    mut on_epoch: impl FnMut(usize, &DetectorEpochStats),
) -> Result<DetectorTrainState> {
    if large_dataset.is_empty() {
        return Err(Error::invalid("detector training dataset is empty"));
    }
    let epochs = config.epochs;
    let mut state = DetectorTrainState::init(config, source)?;
    for e in 0..epochs {
        let n = large_dataset.batch();
        let mut indices: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(indices.as_mut_slice(), &mut state.data_rng);
        let mut stats = DetectorEpochStats::default();
        for chunk in indices.chunks(state.config.batch_size) {
            let batch = large_dataset.select(chunk);
            stats.loss += state.train_step_on_crops(&batch, sampler, crop_side)?;
            stats.steps += 1;
        }
        if stats.steps > 0 {
            stats.loss /= stats.steps as f64;
        }
        state.epoch += 1;
        on_epoch(e, &stats);
    }
    Ok(state)
}

/// The trained bank of level-specific detectors used for scoring.
pub struct DetectorBank {
    detectors: Vec<DetectorTrainState>,
}

impl DetectorBank {
    pub fn new(mut detectors: Vec<DetectorTrainState>) -> Result<Self> {
        if detectors.is_empty() {
            return Err(Error::missing("detector bank is empty"));
        }
        detectors.sort_by_key(|d| d.config.level);
        let side = detectors[0].config.image_side;
        if detectors.iter().any(|d| d.config.image_side != side) {
            return Err(Error::invalid("detectors disagree on image side"));
        }
        Ok(Self { detectors })
    }

    pub fn levels(&self) -> Vec<usize> {
        self.detectors.iter().map(|d| d.config.level).collect()
    }

    pub fn image_side(&self) -> usize {
        self.detectors[0].config.image_side
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DetectorTrainState> {
        self.detectors.iter_mut()
    }

    pub fn get_mut(&mut self, level: usize) -> Result<&mut DetectorTrainState> {
        self.detectors
            .iter_mut()
            .find(|d| d.config.level == level)
            .ok_or_else(|| Error::missing(format!("no detector for level {level}")))
    }

    /// Eval-mode score maps for one image batch, one `(b, g, g)` map per
    /// level, using true coordinate maps.
    pub fn score_maps(&mut self, x: &ImageTensor) -> Result<Vec<(usize, Array4<f64>)>> {
        let mut out = Vec::new();
        for det in &mut self.detectors {
            let g = det.config.grid_side();
            let coords = make_true_coordinate_map(g, g, x.batch())?;
            let map = det.forward(x, &coords)?;
            out.push((det.config.level, map));
        }
        Ok(out)
    }
}

/// Render a detector's patch score map for one image: a grayscale heatmap
/// painted over each window's pixel footprint at input resolution, plus a
/// flat numeric sidecar (one score per window, row-major).
pub fn score_map_visualization(
    det: &mut DetectorTrainState,
    x: &ImageTensor,
    png_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    if x.batch() != 1 {
        return Err(Error::invalid("visualization expects a single image"));
    }
    let g = det.config.grid_side();
    let coords = make_true_coordinate_map(g, g, 1)?;
    let map = det.forward(x, &coords)?;
    let flat: Vec<f64> = map.iter().copied().collect();
    let grid = Array2::from_shape_vec((g, g), flat.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let painted = crate::aggregation::paint_patch_footprints(&grid, det.config.level, x.side());
    crate::viz::heatmap_png(&painted, png_path)?;
    let text: String = flat.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(sidecar_path, text)?;
    Ok(())
}

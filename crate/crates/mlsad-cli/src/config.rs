//! Run configuration: a plain TOML file whose defaults are the reference
//! hyperparameters; an effective copy is dumped into every output directory
//! so runs are reviewable and reloadable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mlsad_core::aggregation::PoolingMode;
use mlsad_core::detectors::DetectorConfig;
use mlsad_core::patchgan::GanConfig;
use mlsad_core::probe::ProbeConfig;

pub const OUTPUT_ROOT_ENV: &str = "MLSAD_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; relative paths resolve under `$MLSAD_OUT` when set.
    pub output_dir: PathBuf,
    /// Detector levels to build (powers of two, at most the image side).
    pub levels: Vec<usize>,
    #[serde(default = "default_pooling")]
    pub pooling: String,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub gan: GanSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub probe: ProbeSection,
}

fn default_pooling() -> String {
    "average".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Manifest file; generated from `root` when absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub root: Option<PathBuf>,
    pub image_side: usize,
    pub channels: usize,
    pub normal_class: String,
    /// Cap on training images (0 = use all), for reduced-scale runs.
    #[serde(default)]
    pub train_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanSection {
    pub width: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_t: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for GanSection {
    fn default() -> Self {
        let c = GanConfig::for_level(2, 32, 3);
        Self {
            width: c.width,
            batch_size: c.batch_size,
            epochs: c.epochs,
            lr_d: c.lr_d,
            lr_g: c.lr_g,
            lr_t: c.lr_t,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    /// "mnist" (one block, wd 1e-3, 100 epochs, decays 50/75) or
    /// "cifar" (two blocks, wd 1e-4, 250 epochs, decays 100/200).
    pub schedule: String,
    pub width: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 = schedule default.
    pub epochs: usize,
    pub num_blocks: usize,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    /// Train on random crops of this side when positive (large images).
    pub crop_side: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            schedule: "mnist".into(),
            width: 64,
            alpha1: 0.6,
            alpha2: 0.4,
            batch_size: 8,
            lr: 1e-3,
            epochs: 0,
            num_blocks: 0,
            weight_decay: 0.0,
            lr_decay_epochs: Vec::new(),
            crop_side: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub percentile: f64,
    pub max_steps: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let c = ProbeConfig::default();
        Self {
            lambda: c.lambda,
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            percentile: c.percentile,
            max_steps: c.max_steps,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.levels.is_empty() {
            anyhow::bail!("config must request at least one level");
        }
        for &l in &self.levels {
            if !l.is_power_of_two() || l > self.dataset.image_side {
                anyhow::bail!(
                    "level {l} must be a power of two at most the image side {}",
                    self.dataset.image_side
                );
            }
        }
        if !self.dataset.image_side.is_power_of_two() {
            anyhow::bail!("image side must be a power of two");
        }
        if self.dataset.manifest.is_none() && self.dataset.root.is_none() {
            anyhow::bail!("dataset needs either a manifest path or a root directory");
        }
        self.pooling()?;
        Ok(())
    }

    pub fn pooling(&self) -> anyhow::Result<PoolingMode> {
        Ok(self.pooling.parse::<PoolingMode>()?)
    }

    /// Output directory, resolving relative paths under `$MLSAD_OUT`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    pub fn gan_config(&self, level: usize) -> GanConfig {
        GanConfig {
            level,
            image_side: self.dataset.image_side,
            channels: self.dataset.channels,
            width: self.gan.width,
            batch_size: self.gan.batch_size,
            epochs: self.gan.epochs,
            lr_d: self.gan.lr_d,
            lr_g: self.gan.lr_g,
            lr_t: self.gan.lr_t,
            adam_beta1: self.gan.adam_beta1,
            adam_beta2: self.gan.adam_beta2,
        }
    }

    pub fn detector_config(&self, level: usize) -> anyhow::Result<DetectorConfig> {
        let side = if self.detector.crop_side > 0 {
            self.detector.crop_side
        } else {
            self.dataset.image_side
        };
        let mut c = match self.detector.schedule.as_str() {
            "mnist" => DetectorConfig::mnist_like(level, side, self.dataset.channels),
            "cifar" => DetectorConfig::cifar_like(level, side, self.dataset.channels),
            other => anyhow::bail!("unknown detector schedule {other} (use mnist or cifar)"),
        };
        c.width = self.detector.width;
        c.alpha1 = self.detector.alpha1;
        c.alpha2 = self.detector.alpha2;
        c.batch_size = self.detector.batch_size;
        c.lr = self.detector.lr;
        if self.detector.epochs > 0 {
            c.epochs = self.detector.epochs;
        }
        if self.detector.num_blocks > 0 {
            c.num_blocks = self.detector.num_blocks;
        }
        if self.detector.weight_decay > 0.0 {
            c.weight_decay = self.detector.weight_decay;
        }
        if !self.detector.lr_decay_epochs.is_empty() {
            c.lr_decay_epochs = self.detector.lr_decay_epochs.clone();
        }
        Ok(c)
    }

    pub fn probe_config(&self, pooling: PoolingMode) -> ProbeConfig {
        ProbeConfig {
            lambda: self.probe.lambda,
            lr: self.probe.lr,
            beta1: self.probe.beta1,
            beta2: self.probe.beta2,
            percentile: self.probe.percentile,
            max_steps: self.probe.max_steps,
            clip: (-1.0, 1.0),
            pooling,
        }
    }

    /// Dump the fully resolved config; reloading it reproduces this value.
    pub fn write_effective(&self, path: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        r#"
seed = 7
output_dir = "out"
levels = [1, 2, 4]

[dataset]
root = "data"
image_side = 32
channels = 3
normal_class = "0"
"#
    }

    #[test]
    fn defaults_are_reference_values() {
        let cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.gan.lr_d, 4e-4);
        assert_eq!(cfg.gan.lr_g, 1e-4);
        assert_eq!(cfg.gan.lr_t, 4e-4);
        assert_eq!(cfg.gan.adam_beta1, 0.0);
        assert_eq!(cfg.gan.adam_beta2, 0.9);
        assert_eq!(cfg.gan.batch_size, 32);
        assert_eq!(cfg.gan.epochs, 300);
        assert_eq!(cfg.detector.alpha1, 0.6);
        assert_eq!(cfg.detector.alpha2, 0.4);
        assert_eq!(cfg.detector.batch_size, 8);
        assert_eq!(cfg.detector.lr, 1e-3);
        let det = cfg.detector_config(4).unwrap();
        assert_eq!(det.num_blocks, 1);
        assert_eq!(det.weight_decay, 1e-3);
        assert_eq!(det.epochs, 100);
        assert_eq!(det.lr_decay_epochs, vec![50, 75]);
        assert_eq!(cfg.probe.lambda, 1e-5);
        assert_eq!(cfg.probe.lr, 0.02);
        assert_eq!(cfg.probe.percentile, 95.0);
        assert_eq!(cfg.probe.max_steps, 2000);
    }

    #[test]
    fn round_trip_is_identical() {
        let cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("effective.toml");
        cfg.write_effective(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn bad_levels_rejected() {
        let mut cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.levels = vec![3];
        assert!(cfg.validate().is_err());
        cfg.levels = vec![64];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cifar_schedule() {
        let mut cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.detector.schedule = "cifar".into();
        let det = cfg.detector_config(2).unwrap();
        assert_eq!(det.num_blocks, 2);
        assert_eq!(det.weight_decay, 1e-4);
        assert_eq!(det.epochs, 250);
        assert_eq!(det.lr_decay_epochs, vec![100, 200]);
    }
}

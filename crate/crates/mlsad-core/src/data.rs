//! Dataset ingestion and preprocessing.
//!
//! On-disk layout: one directory per class under `root/train/` and
//! `root/test/`, holding standard raster files. The manifest records the
//! sorted file lists so every run sees an identical ordering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::types::ImageTensor;

const RASTER_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Classes, per-class train/test file lists (relative to `root`), and the
/// target geometry every image is preprocessed into.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_side: usize,
    pub channels: usize,
    pub classes: Vec<String>,
    pub train: BTreeMap<String, Vec<PathBuf>>,
    pub test: BTreeMap<String, Vec<PathBuf>>,
}

fn scan_split(root: &Path, split: &str) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::invalid(format!("missing split directory {}", dir.display())));
    }
    let mut classes: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut out = BTreeMap::new();
    for class_dir in classes {
        let class = class_dir.file_name().unwrap().to_string_lossy().to_string();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| RASTER_EXTENSIONS.contains(&e.to_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .map(|p| p.strip_prefix(root).unwrap().to_path_buf())
            .collect();
        files.sort();
        out.insert(class, files);
    }
    Ok(out)
}

impl DatasetManifest {
    /// Build a manifest by scanning `root/train/<class>/` and
    /// `root/test/<class>/`.
    pub fn scan(root: &Path, image_side: usize, channels: usize) -> Result<Self> {
        if image_side == 0 || !image_side.is_power_of_two() {
            return Err(Error::invalid("image side must be a power of two"));
        }
        let train = scan_split(root, "train")?;
        let test = scan_split(root, "test")?;
        let mut classes: Vec<String> = train.keys().chain(test.keys()).cloned().collect();
        classes.sort();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::invalid(format!("no classes found under {}", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), image_side, channels, classes, train, test })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "root = {}", self.root.display());
        let _ = writeln!(out, "image_side = {}", self.image_side);
        let _ = writeln!(out, "channels = {}", self.channels);
        let _ = writeln!(out, "classes = {}", self.classes.join(","));
        for (split, map) in [("train", &self.train), ("test", &self.test)] {
            for (class, files) in map {
                let _ = writeln!(out, "[{split} {class}]");
                for f in files {
                    let _ = writeln!(out, "{}", f.display());
                }
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut root = PathBuf::new();
        let mut image_side = 0usize;
        let mut channels = 0usize;
        let mut classes = Vec::new();
        let mut train: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let mut test: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
        let mut section: Option<(String, String)> = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let rest = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Format(format!("bad section: {line}")))?;
                let (split, class) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Format(format!("bad section: {line}")))?;
                section = Some((split.to_string(), class.to_string()));
                continue;
            }
            if let Some((split, class)) = &section {
                let map = if split == "train" { &mut train } else { &mut test };
                map.entry(class.clone()).or_default().push(PathBuf::from(line));
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line: {line}")))?;
            match key.trim() {
                "root" => root = PathBuf::from(value.trim()),
                "image_side" => {
                    image_side = value.trim().parse().map_err(|_| {
                        Error::Format(format!("bad image_side: {value}"))
                    })?
                }
                "channels" => {
                    channels = value.trim().parse().map_err(|_| {
                        Error::Format(format!("bad channels: {value}"))
                    })?
                }
                "classes" => {
                    classes = value.trim().split(',').map(|s| s.trim().to_string()).collect()
                }
                other => return Err(Error::Format(format!("unknown manifest key {other}"))),
            }
        }
        if image_side == 0 || channels == 0 || classes.is_empty() {
            return Err(Error::Format("manifest missing required keys".into()));
        }
        Ok(Self { root, image_side, channels, classes, train, test })
    }
}

/// Decode a raster file to `(h, w, c)` unit-range floats; grayscale files
/// come back with one channel.
pub fn decode_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?;
    let arr = match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 1), |(i, j, _)| {
                g.get_pixel(j as u32, i as u32)[0] as f64 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((h as usize, w as usize, 3), |(i, j, c)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
            })
        }
    };
    Ok(arr)
}

/// Preprocess a decoded unit-range image: bilinear resize to the target
/// side, channel conversion (replicating grayscale when needed), and the
/// affine map `2v - 1` into `[-1, 1]`.
pub fn preprocess(raw: &Array3<f64>, target_side: usize, target_channels: usize) -> Result<ImageTensor> {
    let (h, w, c) = raw.dim();
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::invalid("zero-dimension image"));
    }
    let nchw = raw
        .clone()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((1, c, h, w))
        .unwrap();
    let resized = mlsad_nn::ops::bilinear_resize(&nchw, target_side, target_side);
    let converted = convert_channels(&resized, target_channels)?;
    let mapped = converted.mapv(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0));
    Ok(ImageTensor::from_nchw(&mapped))
}

/// Resize/re-channel an already-normalized tensor. Applying this twice is
/// the same as applying it once (the range map is not reapplied).
pub fn preprocess_tensor(t: &ImageTensor, target_side: usize, target_channels: usize) -> Result<ImageTensor> {
    let nchw = t.to_nchw();
    let resized = mlsad_nn::ops::bilinear_resize(&nchw, target_side, target_side);
    let converted = convert_channels(&resized, target_channels)?;
    Ok(ImageTensor::from_nchw(&converted))
}

fn convert_channels(nchw: &Array4<f64>, target: usize) -> Result<Array4<f64>> {
    let (b, c, h, w) = nchw.dim();
    if c == target {
        return Ok(nchw.clone());
    }
    match (c, target) {
        (1, _) => {
            let mut out = Array4::zeros((b, target, h, w));
            for ch in 0..target {
                out.slice_mut(s![.., ch, .., ..]).assign(&nchw.index_axis(Axis(1), 0));
            }
            Ok(out)
        }
        (3, 1) => {
            let mut out = Array4::zeros((b, 1, h, w));
            let weights = [0.299, 0.587, 0.114];
            for (ch, wgt) in weights.iter().enumerate() {
                out.slice_mut(s![.., 0, .., ..])
                    .scaled_add(*wgt, &nchw.index_axis(Axis(1), ch));
            }
            Ok(out)
        }
        _ => Err(Error::invalid(format!("cannot convert {c} channels to {target}"))),
    }
}

pub fn preprocess_file(path: &Path, target_side: usize, target_channels: usize) -> Result<ImageTensor> {
    let raw = decode_image(path)?;
    preprocess(&raw, target_side, target_channels)
}

/// Lazily decoding dataset handle with deterministic ordering.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Open a dataset, verifying that every listed file exists. Corrupt
    /// files surface (listed) on first decode.
    pub fn open(manifest: DatasetManifest) -> Result<Self> {
        let mut missing = Vec::new();
        for files in manifest.train.values().chain(manifest.test.values()) {
            for f in files {
                let p = manifest.root.join(f);
                if !p.is_file() {
                    missing.push(p);
                }
            }
        }
        if !missing.is_empty() {
            missing.truncate(16);
            return Err(Error::Ingestion { files: missing, reason: "file not found".into() });
        }
        Ok(Self { manifest })
    }

    pub fn load_one(&self, rel: &Path) -> Result<ImageTensor> {
        preprocess_file(
            &self.manifest.root.join(rel),
            self.manifest.image_side,
            self.manifest.channels,
        )
        .map_err(|e| match e {
            Error::Image(err) => Error::Ingestion {
                files: vec![self.manifest.root.join(rel)],
                reason: err.to_string(),
            },
            other => other,
        })
    }

    /// Load and stack a list of files into one batch.
    pub fn load_batch(&self, rels: &[PathBuf]) -> Result<ImageTensor> {
        let side = self.manifest.image_side;
        let ch = self.manifest.channels;
        let mut out = Array4::zeros((rels.len(), side, side, ch));
        for (i, rel) in rels.iter().enumerate() {
            let t = self.load_one(rel)?;
            out.slice_mut(s![i, .., .., ..]).assign(&t.data().index_axis(Axis(0), 0));
        }
        Ok(ImageTensor::new_unchecked(out))
    }
}

/// One-vs-rest split: train on a single class, test on everything with
/// binary labels. Validation is carved from the tail of the training list.
#[derive(Debug, Clone, PartialEq)]
pub struct OneClassSplit {
    pub normal_class: String,
    pub train: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    /// `(path, anomalous)` over the full test split of every class.
    pub test: Vec<(PathBuf, bool)>,
}

pub const VALIDATION_FRACTION: f64 = 0.1;

/// One split per class, deterministically derived from the manifest.
pub fn make_one_class_splits(manifest: &DatasetManifest) -> Result<Vec<OneClassSplit>> {
    manifest
        .classes
        .iter()
        .map(|class| make_one_class_split(manifest, class))
        .collect()
}

pub fn make_one_class_split(manifest: &DatasetManifest, normal_class: &str) -> Result<OneClassSplit> {
    let train_all = manifest
        .train
        .get(normal_class)
        .ok_or_else(|| Error::invalid(format!("class {normal_class} absent from training split")))?;
    if train_all.is_empty() {
        return Err(Error::invalid(format!("class {normal_class} has no training images")));
    }
    let n_val = ((train_all.len() as f64) * VALIDATION_FRACTION).floor() as usize;
    let n_train = train_all.len() - n_val;
    let mut test = Vec::new();
    for (class, files) in &manifest.test {
        let anomalous = class != normal_class;
        for f in files {
            test.push((f.clone(), anomalous));
        }
    }
    Ok(OneClassSplit {
        normal_class: normal_class.to_string(),
        train: train_all[..n_train].to_vec(),
        validation: train_all[n_train..].to_vec(),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn write_fixture(root: &Path) {
        for (split, classes, n) in [("train", ["a", "b"], 5usize), ("test", ["a", "b"], 3)] {
            for class in classes {
                let dir = root.join(split).join(class);
                std::fs::create_dir_all(&dir).unwrap();
                for i in 0..n {
                    let img = GrayImage::from_fn(7, 9, |x, y| {
                        image::Luma([((x * 13 + y * 29 + i as u32 * 7) % 256) as u8])
                    });
                    img.save(dir.join(format!("{i:03}.png"))).unwrap();
                }
            }
        }
    }

    #[test]
    fn scan_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let m = DatasetManifest::scan(dir.path(), 8, 3).unwrap();
        assert_eq!(m.classes, vec!["a", "b"]);
        assert_eq!(m.train["a"].len(), 5);
        assert_eq!(m.test["b"].len(), 3);
        let mpath = dir.path().join("manifest.txt");
        m.save(&mpath).unwrap();
        let m2 = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn grayscale_replicates_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_fn(28, 28, |x, y| image::Luma([((x + y) % 256) as u8]))
            .save(&p)
            .unwrap();
        let t = preprocess_file(&p, 32, 3).unwrap();
        assert_eq!(t.data().dim(), (1, 32, 32, 3));
        for i in 0..32 {
            for j in 0..32 {
                let a = t.data()[(0, i, j, 0)];
                assert_eq!(a, t.data()[(0, i, j, 1)]);
                assert_eq!(a, t.data()[(0, i, j, 2)]);
            }
        }
    }

    #[test]
    fn constant_gray_maps_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        RgbImage::from_fn(16, 16, |_, _| image::Rgb([128, 128, 128])).save(&p).unwrap();
        let t = preprocess_file(&p, 16, 3).unwrap();
        let expect = 2.0 * (128.0 / 255.0) - 1.0;
        for &v in t.data().iter() {
            assert!((v - expect).abs() < 1e-12);
            assert!((v - 0.0039).abs() < 1e-4);
        }
    }

    #[test]
    fn already_target_sized_input_only_rescales() {
        let raw = Array3::from_shape_fn((16, 16, 3), |(i, j, c)| {
            ((i * 31 + j * 7 + c * 3) % 255) as f64 / 255.0
        });
        let t = preprocess(&raw, 16, 3).unwrap();
        for ((i, j, c), &r) in raw.indexed_iter() {
            assert!((t.data()[(0, i, j, c)] - (2.0 * r - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn preprocess_tensor_is_idempotent() {
        let raw = Array3::from_shape_fn((20, 14, 3), |(i, j, c)| {
            ((i * 3 + j * 5 + c) % 100) as f64 / 100.0
        });
        let once = preprocess(&raw, 16, 3).unwrap();
        let twice = preprocess_tensor(&once, 16, 3).unwrap();
        for (a, b) in once.data().iter().zip(twice.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn split_protocol() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let m = DatasetManifest::scan(dir.path(), 8, 1).unwrap();
        let splits = make_one_class_splits(&m).unwrap();
        assert_eq!(splits.len(), 2);
        let sa = &splits[0];
        assert_eq!(sa.normal_class, "a");
        assert_eq!(sa.train.len(), 5); // floor(5 * 0.1) = 0 to validation
        assert_eq!(sa.test.len(), 6);
        assert_eq!(sa.test.iter().filter(|(_, anom)| *anom).count(), 3);
        // determinism
        let splits2 = make_one_class_splits(&m).unwrap();
        assert_eq!(splits, &splits2[..]);
        assert!(make_one_class_split(&m, "zz").is_err());
    }

    #[test]
    fn dataset_open_flags_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let mut m = DatasetManifest::scan(dir.path(), 8, 1).unwrap();
        m.train.get_mut("a").unwrap().push(PathBuf::from("train/a/nope.png"));
        match Dataset::open(m) {
            Err(Error::Ingestion { files, .. }) => assert_eq!(files.len(), 1),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn load_batch_geometry() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let m = DatasetManifest::scan(dir.path(), 8, 3).unwrap();
        let ds = Dataset::open(m).unwrap();
        let rels = ds.manifest.train["a"].clone();
        let batch = ds.load_batch(&rels).unwrap();
        assert_eq!(batch.data().dim(), (5, 8, 8, 3));
    }
}

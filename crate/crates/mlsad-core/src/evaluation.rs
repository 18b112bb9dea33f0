//! AUROC computation (rank-based, exact with midrank ties), benchmark runs
//! over one-class splits, and per-level ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{score_batch, PoolingMode};
use crate::data::{Dataset, OneClassSplit};
use crate::detectors::DetectorBank;
use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// `P(anomalous > normal) + 0.5 P(tie)` via the Mann-Whitney statistic with
/// midranks; exact and invariant under strictly increasing transforms.
pub fn auroc(scores_normal: &[f64], scores_anomalous: &[f64]) -> Result<f64> {
    if scores_normal.is_empty() || scores_anomalous.is_empty() {
        return Err(Error::invalid("AUROC needs non-empty score lists"));
    }
    let n0 = scores_normal.len();
    let n1 = scores_anomalous.len();
    let mut all: Vec<(f64, bool)> = scores_normal
        .iter()
        .map(|&s| (s, false))
        .chain(scores_anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be comparable"));
    let mut rank_sum_anom = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // midrank of the tie group (1-based ranks i+1 ..= j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_anom += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_anom - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n0 as f64 * n1 as f64))
}

/// One scored test image, as persisted in score tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub id: String,
    pub label: String,
    pub anomalous: bool,
    pub levels: Vec<usize>,
    pub per_level_means: Vec<f64>,
    pub aggregate: f64,
}

/// AUROC of the aggregate scores in a scored set.
pub fn auroc_from_scored(scored: &[ScoredImage]) -> Result<f64> {
    let normal: Vec<f64> = scored.iter().filter(|s| !s.anomalous).map(|s| s.aggregate).collect();
    let anom: Vec<f64> = scored.iter().filter(|s| s.anomalous).map(|s| s.aggregate).collect();
    auroc(&normal, &anom)
}

/// Per-level AUROCs using each level's mean patch score alone.
pub fn per_level_auroc(scored: &[ScoredImage]) -> Result<Vec<(usize, f64)>> {
    if scored.is_empty() {
        return Err(Error::invalid("no scored images"));
    }
    let levels = scored[0].levels.clone();
    let mut out = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let normal: Vec<f64> = scored
            .iter()
            .filter(|s| !s.anomalous)
            .map(|s| s.per_level_means[li])
            .collect();
        let anom: Vec<f64> = scored
            .iter()
            .filter(|s| s.anomalous)
            .map(|s| s.per_level_means[li])
            .collect();
        out.push((*level, auroc(&normal, &anom)?));
    }
    Ok(out)
}

/// Result of one benchmark run (one normal class).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub normal_class: String,
    pub anomaly_source: String,
    pub auroc: f64,
    pub per_level_auroc: Vec<(usize, f64)>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub seed: u64,
    pub pooling: String,
}

const SCORING_BATCH: usize = 16;

/// Score every test image of a one-class split.
pub fn score_split(
    bank: &mut DetectorBank,
    dataset: &Dataset,
    split: &OneClassSplit,
    mode: PoolingMode,
) -> Result<Vec<ScoredImage>> {
    let mut scored = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(SCORING_BATCH) {
        let paths: Vec<_> = chunk.iter().map(|(p, _)| p.clone()).collect();
        let batch = dataset.load_batch(&paths)?;
        let ids: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        let records = score_batch(bank, &ids, &batch, mode)?;
        for (rec, (path, anomalous)) in records.into_iter().zip(chunk.iter()) {
            let label = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|c| c.to_string_lossy().to_string())
                .unwrap_or_default();
            scored.push(ScoredImage {
                id: rec.image_id,
                label,
                anomalous: *anomalous,
                levels: rec.levels,
                per_level_means: rec.per_level_means,
                aggregate: rec.aggregate,
            });
        }
    }
    Ok(scored)
}

/// Full benchmark for one split: test-split AUROC plus per-level AUROCs.
pub fn run_benchmark(
    bank: &mut DetectorBank,
    dataset: &Dataset,
    split: &OneClassSplit,
    mode: PoolingMode,
    seed: u64,
) -> Result<(BenchmarkResult, Vec<ScoredImage>)> {
    let scored = score_split(bank, dataset, split, mode)?;
    let result = BenchmarkResult {
        normal_class: split.normal_class.clone(),
        anomaly_source: "test-split".into(),
        auroc: auroc_from_scored(&scored)?,
        per_level_auroc: per_level_auroc(&scored)?,
        n_normal: scored.iter().filter(|s| !s.anomalous).count(),
        n_anomalous: scored.iter().filter(|s| s.anomalous).count(),
        seed,
        pooling: mode.to_string(),
    };
    Ok((result, scored))
}

/// A named set of anomalous images for the level ablation.
pub struct AnomalySource {
    pub name: String,
    pub images: ImageTensor,
}

/// Ablation table: rows are single levels plus the full aggregate, columns
/// are anomaly sources; entries are AUROC against the split's normal test
/// images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelAblation {
    pub normal_class: String,
    pub levels: Vec<usize>,
    pub sources: Vec<String>,
    /// `per_level[row][col]`: row = level index, col = source index.
    pub per_level: Vec<Vec<f64>>,
    /// Aggregate-score AUROC per source.
    pub aggregate_row: Vec<f64>,
}

pub fn run_level_ablation(
    bank: &mut DetectorBank,
    dataset: &Dataset,
    split: &OneClassSplit,
    sources: &[AnomalySource],
    mode: PoolingMode,
) -> Result<LevelAblation> {
    // score normal test images once
    let normal_paths: Vec<_> = split
        .test
        .iter()
        .filter(|(_, anom)| !anom)
        .map(|(p, _)| p.clone())
        .collect();
    if normal_paths.is_empty() {
        return Err(Error::invalid("split has no normal test images"));
    }
    let mut normal_scored: Vec<ScoredImage> = Vec::new();
    for chunk in normal_paths.chunks(SCORING_BATCH) {
        let batch = dataset.load_batch(chunk)?;
        let ids: Vec<String> = chunk.iter().map(|p| p.display().to_string()).collect();
        for rec in score_batch(bank, &ids, &batch, mode)? {
            normal_scored.push(ScoredImage {
                id: rec.image_id,
                label: split.normal_class.clone(),
                anomalous: false,
                levels: rec.levels,
                per_level_means: rec.per_level_means,
                aggregate: rec.aggregate,
            });
        }
    }
    let levels = normal_scored[0].levels.clone();
    let mut per_level = vec![Vec::new(); levels.len()];
    let mut aggregate_row = Vec::new();
    for source in sources {
        let n = source.images.batch();
        let mut anom_scored: Vec<ScoredImage> = Vec::new();
        for start in (0..n).step_by(SCORING_BATCH) {
            let idx: Vec<usize> = (start..(start + SCORING_BATCH).min(n)).collect();
            let batch = source.images.select(&idx);
            let ids: Vec<String> = idx.iter().map(|i| format!("{}/{i}", source.name)).collect();
            for rec in score_batch(bank, &ids, &batch, mode)? {
                anom_scored.push(ScoredImage {
                    id: rec.image_id,
                    label: source.name.clone(),
                    anomalous: true,
                    levels: rec.levels,
                    per_level_means: rec.per_level_means,
                    aggregate: rec.aggregate,
                });
            }
        }
        for (li, _) in levels.iter().enumerate() {
            let normal: Vec<f64> = normal_scored.iter().map(|s| s.per_level_means[li]).collect();
            let anom: Vec<f64> = anom_scored.iter().map(|s| s.per_level_means[li]).collect();
            per_level[li].push(auroc(&normal, &anom)?);
        }
        let normal: Vec<f64> = normal_scored.iter().map(|s| s.aggregate).collect();
        let anom: Vec<f64> = anom_scored.iter().map(|s| s.aggregate).collect();
        aggregate_row.push(auroc(&normal, &anom)?);
    }
    Ok(LevelAblation {
        normal_class: split.normal_class.clone(),
        levels,
        sources: sources.iter().map(|s| s.name.clone()).collect(),
        per_level,
        aggregate_row,
    })
}

/// Persist scored images as a delimited table. Floats are written in
/// shortest round-trip form, so reloading reproduces them bit-exactly.
pub fn write_score_table(path: &Path, scored: &[ScoredImage], mode: PoolingMode) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let levels = scored.first().map(|s| s.levels.clone()).unwrap_or_default();
    let mut header = vec!["image_id".to_string(), "label".to_string(), "anomalous".to_string()];
    header.extend(levels.iter().map(|l| format!("mean_{l}")));
    header.push("aggregate".into());
    header.push("mode".into());
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for s in scored {
        let mut row = vec![s.id.clone(), s.label.clone(), s.anomalous.to_string()];
        row.extend(s.per_level_means.iter().map(|v| format!("{v}")));
        row.push(format!("{}", s.aggregate));
        row.push(mode.to_string());
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoredImage>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let levels: Vec<usize> = headers
        .iter()
        .filter_map(|h| h.strip_prefix("mean_").and_then(|l| l.parse().ok()))
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let id = rec[0].to_string();
        let label = rec[1].to_string();
        let anomalous: bool = rec[2].parse().map_err(|_| Error::Format("bad anomalous flag".into()))?;
        let mut per_level_means = Vec::new();
        for i in 0..levels.len() {
            per_level_means.push(
                rec[3 + i]
                    .parse()
                    .map_err(|_| Error::Format("bad level mean".into()))?,
            );
        }
        let aggregate: f64 = rec[3 + levels.len()]
            .parse()
            .map_err(|_| Error::Format("bad aggregate".into()))?;
        out.push(ScoredImage {
            id,
            label,
            anomalous,
            levels: levels.clone(),
            per_level_means,
            aggregate,
        });
    }
    Ok(out)
}

/// ROC curve points `(fpr, tpr)` for plotting.
pub fn roc_points(scores_normal: &[f64], scores_anomalous: &[f64]) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = scores_normal.iter().chain(scores_anomalous).cloned().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp = scores_normal.iter().filter(|&&s| s >= t).count() as f64;
        let tp = scores_anomalous.iter().filter(|&&s| s >= t).count() as f64;
        pts.push((fp / scores_normal.len() as f64, tp / scores_anomalous.len() as f64));
    }
    pts.push((1.0, 1.0));
    pts
}

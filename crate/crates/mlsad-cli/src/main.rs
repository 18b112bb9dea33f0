//! `mlsad` — config-driven pipeline driver.
//!
//! Exit codes: 0 success, 1 validation failure, 2 missing dependency,
//! 3 numerical failure.

mod config;
mod lock;
mod oracle_cmd;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlsad_core::aggregation::{localize, score_image, single_image_grids};
use mlsad_core::data::{make_one_class_split, Dataset, DatasetManifest};
use mlsad_core::detectors::{DetectorBank, DetectorTrainState};
use mlsad_core::error::Error as CoreError;
use mlsad_core::evaluation as eval;
use mlsad_core::mrf::{Level0Sampler, Level1Sampler, SourceSampler};
use mlsad_core::patchgan::{GanTrainState, GeneratorSampler};
use mlsad_core::probe::fooling_search;
use mlsad_core::types::{streams, RandomSource};
use mlsad_core::{viz, ImageTensor};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "mlsad", version, about = "Multi-level structure anomaly detection pipeline")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "mlsad.toml")]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a dataset root and write its manifest.
    InitManifest,
    /// Run the exact enumeration checks (bundled fixture plus random suite).
    OracleVerify {
        /// Verify a specific distribution table instead of the bundled one.
        #[arg(long)]
        fixture: Option<PathBuf>,
    },
    /// Train the generator for one level.
    TrainGan {
        #[arg(long)]
        level: usize,
    },
    /// Sample images from a trained generator into a PNG grid.
    Sample {
        #[arg(long)]
        level: usize,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Train the detector for one level.
    TrainDetector {
        #[arg(long)]
        level: usize,
    },
    /// Score an image file or directory with the trained bank.
    Score {
        #[arg(long)]
        input: PathBuf,
    },
    /// Benchmark the trained bank on the configured one-class split.
    Evaluate,
    /// Per-level AUROC ablation against noise (and optional image dirs).
    AblateLevels {
        /// Extra anomaly sources as name=directory pairs.
        #[arg(long)]
        source: Vec<String>,
        #[arg(long, default_value_t = 256)]
        noise_count: usize,
    },
    /// Pixel-level anomaly heatmap for one image.
    Localize {
        #[arg(long)]
        input: PathBuf,
    },
    /// Gradient-descent search for images scoring below the normal band.
    Probe {
        /// Directory of starting images; omit to start from noise.
        #[arg(long)]
        init_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success; real usage errors are
            // validation failures
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    if let Some(core) = e.downcast_ref::<CoreError>() {
        match core {
            CoreError::MissingDependency(_) => 2,
            CoreError::NonFinite(_) | CoreError::Convergence { .. } => 3,
            _ => 1,
        }
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::OracleVerify { fixture } = &cli.command {
        // the oracle needs no dataset or output directory
        return oracle_cmd::oracle_verify(fixture.as_deref());
    }
    let cfg = RunConfig::load(&cli.config)?;
    let out = cfg.resolved_output_dir();
    std::fs::create_dir_all(&out)?;
    let _lock = lock::DirLock::acquire(&out, cli.force)?;
    cfg.write_effective(&out.join("effective-config.toml"))?;

    match cli.command {
        Command::OracleVerify { .. } => unreachable!(),
        Command::InitManifest => cmd_init_manifest(&cfg, cli.force),
        Command::TrainGan { level } => cmd_train_gan(&cfg, &out, level, cli.force),
        Command::Sample { level, count } => cmd_sample(&cfg, &out, level, count, cli.force),
        Command::TrainDetector { level } => cmd_train_detector(&cfg, &out, level, cli.force),
        Command::Score { input } => cmd_score(&cfg, &out, &input, cli.force),
        Command::Evaluate => cmd_evaluate(&cfg, &out, cli.force),
        Command::AblateLevels { source, noise_count } => {
            cmd_ablate_levels(&cfg, &out, &source, noise_count, cli.force)
        }
        Command::Localize { input } => cmd_localize(&cfg, &out, &input, cli.force),
        Command::Probe { init_dir, count } => {
            cmd_probe(&cfg, &out, init_dir.as_deref(), count, cli.force)
        }
    }
}

fn refuse_existing(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        anyhow::bail!(
            "refusing to overwrite {} (pass --force to replace it)",
            path.display()
        );
    }
    Ok(())
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.dataset
        .manifest
        .clone()
        .unwrap_or_else(|| cfg.resolved_output_dir().join("manifest.txt"))
}

fn open_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let mpath = manifest_path(cfg);
    let manifest = if mpath.is_file() {
        DatasetManifest::load(&mpath)?
    } else if let Some(root) = &cfg.dataset.root {
        let m = DatasetManifest::scan(root, cfg.dataset.image_side, cfg.dataset.channels)?;
        m.save(&mpath)?;
        m
    } else {
        return Err(CoreError::missing(format!(
            "manifest {} not found and no dataset root configured",
            mpath.display()
        ))
        .into());
    };
    Ok(Dataset::open(manifest)?)
}

fn load_train_images(cfg: &RunConfig, dataset: &Dataset) -> anyhow::Result<ImageTensor> {
    let split = make_one_class_split(&dataset.manifest, &cfg.dataset.normal_class)?;
    let mut files = split.train.clone();
    if cfg.dataset.train_limit > 0 && files.len() > cfg.dataset.train_limit {
        files.truncate(cfg.dataset.train_limit);
    }
    println!(
        "loading {} training images of class {}",
        files.len(),
        cfg.dataset.normal_class
    );
    Ok(dataset.load_batch(&files)?)
}

fn gan_ckpt(out: &Path, level: usize) -> PathBuf {
    out.join(format!("gan_w{level}.ckpt"))
}

fn det_ckpt(out: &Path, level: usize) -> PathBuf {
    out.join(format!("detector_s{level}.ckpt"))
}

fn cmd_init_manifest(cfg: &RunConfig, force: bool) -> anyhow::Result<()> {
    let mpath = manifest_path(cfg);
    refuse_existing(&mpath, force)?;
    let root = cfg
        .dataset
        .root
        .as_ref()
        .ok_or_else(|| CoreError::missing("dataset.root is required for init-manifest"))?;
    let m = DatasetManifest::scan(root, cfg.dataset.image_side, cfg.dataset.channels)?;
    m.save(&mpath)?;
    println!("manifest written to {} ({} classes)", mpath.display(), m.classes.len());
    Ok(())
}

fn cmd_train_gan(cfg: &RunConfig, out: &Path, level: usize, force: bool) -> anyhow::Result<()> {
    if level < 2 {
        return Err(CoreError::invalid(format!(
            "levels 0 and 1 need no trained generator; got {level}"
        ))
        .into());
    }
    let ckpt = gan_ckpt(out, level);
    refuse_existing(&ckpt, force)?;
    let dataset = open_dataset(cfg)?;
    let train = load_train_images(cfg, &dataset)?;
    let source = RandomSource::new(cfg.seed);
    let gan_cfg = cfg.gan_config(level);
    let epochs = gan_cfg.epochs;
    let mut state = mlsad_core::patchgan::train_generator(gan_cfg, &train, &source, |e, stats| {
        println!(
            "gan w{level} epoch {}/{epochs}: d={:.4} g_adv={:.4} mi={:.4} beta={:.3}",
            e + 1,
            stats.disc_loss,
            stats.gen_adv_loss,
            stats.mi_estimate,
            stats.beta
        );
    })?;
    state.save(&ckpt)?;
    println!("generator checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, out: &Path, level: usize, count: usize, force: bool) -> anyhow::Result<()> {
    let grid_path = out.join(format!("samples_w{level}.png"));
    refuse_existing(&grid_path, force)?;
    let ckpt = gan_ckpt(out, level);
    if !ckpt.is_file() {
        return Err(CoreError::missing(format!(
            "no generator checkpoint for level {level}; run `mlsad train-gan --level {level}` first"
        ))
        .into());
    }
    let mut state = GanTrainState::load(&ckpt)?;
    let source = RandomSource::new(cfg.seed);
    let mut rng = source.stream(streams::for_level(streams::EVAL_NOISE, level));
    let images = state.sample(count, &mut rng)?;
    viz::export_image_grid(&images, (count as f64).sqrt().ceil() as usize, &grid_path)?;
    println!("wrote {count} samples to {}", grid_path.display());
    Ok(())
}

fn source_sampler_for(
    cfg: &RunConfig,
    out: &Path,
    level: usize,
    train: &ImageTensor,
) -> anyhow::Result<Box<dyn SourceSampler>> {
    let source_level = level / 2;
    Ok(match source_level {
        0 => Box::new(Level0Sampler {
            side: train.side(),
            channels: cfg.dataset.channels,
        }),
        1 => Box::new(Level1Sampler::new(train.clone())?),
        w => {
            let ckpt = gan_ckpt(out, w);
            if !ckpt.is_file() {
                return Err(CoreError::missing(format!(
                    "detector level {level} needs the level-{w} generator; run `mlsad train-gan --level {w}` first"
                ))
                .into());
            }
            Box::new(GeneratorSampler { state: GanTrainState::load(&ckpt)? })
        }
    })
}

fn cmd_train_detector(cfg: &RunConfig, out: &Path, level: usize, force: bool) -> anyhow::Result<()> {
    if !cfg.levels.contains(&level) {
        return Err(CoreError::invalid(format!(
            "level {level} is not in the configured level set {:?}",
            cfg.levels
        ))
        .into());
    }
    let ckpt = det_ckpt(out, level);
    refuse_existing(&ckpt, force)?;
    let dataset = open_dataset(cfg)?;
    let train = load_train_images(cfg, &dataset)?;
    let mut sampler = source_sampler_for(cfg, out, level, &train)?;
    let source = RandomSource::new(cfg.seed);
    let det_cfg = cfg.detector_config(level)?;
    let epochs = det_cfg.epochs;
    let crop = cfg.detector.crop_side;
    let mut state = if crop > 0 && crop < train.side() {
        mlsad_core::detectors::train_detector_on_crops(
            det_cfg,
            &train,
            crop,
            sampler.as_mut(),
            &source,
            |e, stats| println!("detector s{level} epoch {}/{epochs}: loss={:.4}", e + 1, stats.loss),
        )?
    } else {
        mlsad_core::detectors::train_detector(
            det_cfg,
            &train,
            sampler.as_mut(),
            &source,
            |e, stats| println!("detector s{level} epoch {}/{epochs}: loss={:.4}", e + 1, stats.loss),
        )?
    };
    state.save(&ckpt)?;
    println!("detector checkpoint written to {}", ckpt.display());
    Ok(())
}

fn load_bank(cfg: &RunConfig, out: &Path) -> anyhow::Result<DetectorBank> {
    let mut detectors = Vec::new();
    for &level in &cfg.levels {
        let ckpt = det_ckpt(out, level);
        if !ckpt.is_file() {
            return Err(CoreError::missing(format!(
                "no detector checkpoint for level {level}; run `mlsad train-detector --level {level}` first"
            ))
            .into());
        }
        detectors.push(DetectorTrainState::load(&ckpt)?);
    }
    Ok(DetectorBank::new(detectors)?)
}

fn collect_rasters(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| ["png", "jpg", "jpeg", "bmp"].contains(&e.to_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        anyhow::bail!("no raster files under {}", dir.display());
    }
    Ok(files)
}

fn cmd_score(cfg: &RunConfig, out: &Path, input: &Path, force: bool) -> anyhow::Result<()> {
    let table = out.join("scores").join(format!(
        "{}.csv",
        input.file_stem().unwrap_or_default().to_string_lossy()
    ));
    refuse_existing(&table, force)?;
    std::fs::create_dir_all(table.parent().unwrap())?;
    let mut bank = load_bank(cfg, out)?;
    let mode = cfg.pooling()?;
    let files = if input.is_dir() {
        collect_rasters(input)?
    } else {
        vec![input.to_path_buf()]
    };
    let mut scored = Vec::new();
    for f in &files {
        let img = mlsad_core::data::preprocess_file(f, cfg.dataset.image_side, cfg.dataset.channels)?;
        let rec = score_image(&mut bank, &f.display().to_string(), &img, mode)?;
        println!("{}  A(x) = {:.6}", f.display(), rec.aggregate);
        scored.push(eval::ScoredImage {
            id: rec.image_id,
            label: "-".into(),
            anomalous: false,
            levels: rec.levels,
            per_level_means: rec.per_level_means,
            aggregate: rec.aggregate,
        });
    }
    eval::write_score_table(&table, &scored, mode)?;
    println!("score table written to {}", table.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    let eval_dir = out.join("eval");
    let results = eval_dir.join("results.csv");
    refuse_existing(&results, force)?;
    std::fs::create_dir_all(&eval_dir)?;
    let dataset = open_dataset(cfg)?;
    let split = make_one_class_split(&dataset.manifest, &cfg.dataset.normal_class)?;
    let mut bank = load_bank(cfg, out)?;
    let mode = cfg.pooling()?;
    let (result, scored) = eval::run_benchmark(&mut bank, &dataset, &split, mode, cfg.seed)?;
    eval::write_score_table(&eval_dir.join("scores.csv"), &scored, mode)?;

    let mut text = String::from("normal_class,pooling,auroc,n_normal,n_anomalous,seed\n");
    text.push_str(&format!(
        "{},{},{},{},{},{}\n",
        result.normal_class, result.pooling, result.auroc, result.n_normal, result.n_anomalous, result.seed
    ));
    std::fs::write(&results, text)?;

    let normal: Vec<f64> = scored.iter().filter(|s| !s.anomalous).map(|s| s.aggregate).collect();
    let anom: Vec<f64> = scored.iter().filter(|s| s.anomalous).map(|s| s.aggregate).collect();
    viz::roc_curve_svg(
        &eval::roc_points(&normal, &anom),
        &format!("class {} AUROC {:.4}", result.normal_class, result.auroc),
        &eval_dir.join("roc.svg"),
    )?;
    let labels: Vec<String> = result
        .per_level_auroc
        .iter()
        .map(|(l, _)| format!("s={l}"))
        .chain(std::iter::once("all".into()))
        .collect();
    let values: Vec<f64> = result
        .per_level_auroc
        .iter()
        .map(|(_, a)| *a)
        .chain(std::iter::once(result.auroc))
        .collect();
    viz::bar_chart_svg(&labels, &values, "per-level AUROC", &eval_dir.join("levels.svg"))?;

    let mut summary = format!(
        "normal class {} | pooling {} | AUROC {:.4} ({} normal / {} anomalous)\n",
        result.normal_class, result.pooling, result.auroc, result.n_normal, result.n_anomalous
    );
    for (l, a) in &result.per_level_auroc {
        summary.push_str(&format!("  level {l}: AUROC {a:.4}\n"));
    }
    std::fs::write(eval_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("evaluation artifacts in {}", eval_dir.display());
    Ok(())
}

fn cmd_ablate_levels(
    cfg: &RunConfig,
    out: &Path,
    source_args: &[String],
    noise_count: usize,
    force: bool,
) -> anyhow::Result<()> {
    let abl_dir = out.join("ablation");
    let table_path = abl_dir.join("table.csv");
    refuse_existing(&table_path, force)?;
    std::fs::create_dir_all(&abl_dir)?;
    let dataset = open_dataset(cfg)?;
    let split = make_one_class_split(&dataset.manifest, &cfg.dataset.normal_class)?;
    let mut bank = load_bank(cfg, out)?;
    let mode = cfg.pooling()?;

    let source = RandomSource::new(cfg.seed);
    let mut rng = source.stream(streams::EVAL_NOISE);
    let mut sources = vec![eval::AnomalySource {
        name: "noise".into(),
        images: mlsad_core::mrf::sample_level0(
            noise_count,
            cfg.dataset.image_side,
            cfg.dataset.channels,
            &mut rng,
        ),
    }];
    for arg in source_args {
        let (name, dir) = arg
            .split_once('=')
            .ok_or_else(|| CoreError::invalid(format!("source must be name=dir, got {arg}")))?;
        let files = collect_rasters(Path::new(dir))?;
        let mut batch = Vec::new();
        for f in &files {
            batch.push(mlsad_core::data::preprocess_file(
                f,
                cfg.dataset.image_side,
                cfg.dataset.channels,
            )?);
        }
        sources.push(eval::AnomalySource {
            name: name.to_string(),
            images: ImageTensor::stack(&batch)?,
        });
    }

    let ablation = eval::run_level_ablation(&mut bank, &dataset, &split, &sources, mode)?;
    let mut text = String::from("level");
    for s in &ablation.sources {
        text.push_str(&format!(",{s}"));
    }
    text.push('\n');
    for (li, level) in ablation.levels.iter().enumerate() {
        text.push_str(&format!("{level}"));
        for v in &ablation.per_level[li] {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    text.push_str("all");
    for v in &ablation.aggregate_row {
        text.push_str(&format!(",{v}"));
    }
    text.push('\n');
    std::fs::write(&table_path, &text)?;
    print!("{text}");
    println!("ablation table written to {}", table_path.display());
    Ok(())
}

fn cmd_localize(cfg: &RunConfig, out: &Path, input: &Path, force: bool) -> anyhow::Result<()> {
    let loc_dir = out.join("localize");
    let png = loc_dir.join(format!(
        "{}_heatmap.png",
        input.file_stem().unwrap_or_default().to_string_lossy()
    ));
    refuse_existing(&png, force)?;
    std::fs::create_dir_all(&loc_dir)?;
    let mut bank = load_bank(cfg, out)?;
    let img = mlsad_core::data::preprocess_file(input, cfg.dataset.image_side, cfg.dataset.channels)?;
    let maps = single_image_grids(&mut bank, &img)?;
    let heat = localize(&maps, cfg.dataset.image_side, cfg.dataset.image_side)?;
    viz::heatmap_png(&heat, &png)?;
    println!("heatmap written to {}", png.display());
    Ok(())
}

fn cmd_probe(
    cfg: &RunConfig,
    out: &Path,
    init_dir: Option<&Path>,
    count: usize,
    force: bool,
) -> anyhow::Result<()> {
    let probe_dir = out.join("probe");
    let report_path = probe_dir.join("report.csv");
    refuse_existing(&report_path, force)?;
    std::fs::create_dir_all(&probe_dir)?;
    let scores_path = out.join("eval").join("scores.csv");
    if !scores_path.is_file() {
        return Err(CoreError::missing(
            "probe needs the normal-score table; run `mlsad evaluate` first".to_string(),
        )
        .into());
    }
    let scored = eval::read_score_table(&scores_path)?;
    let normal_scores: Vec<f64> = scored.iter().filter(|s| !s.anomalous).map(|s| s.aggregate).collect();
    if normal_scores.is_empty() {
        return Err(CoreError::missing("score table has no normal images").into());
    }
    let mut bank = load_bank(cfg, out)?;
    let mode = cfg.pooling()?;

    let source = RandomSource::new(cfg.seed);
    let init = match init_dir {
        Some(dir) => {
            let files = collect_rasters(dir)?;
            let mut batch = Vec::new();
            for f in files.into_iter().take(count) {
                batch.push(mlsad_core::data::preprocess_file(
                    &f,
                    cfg.dataset.image_side,
                    cfg.dataset.channels,
                )?);
            }
            ImageTensor::stack(&batch)?
        }
        None => mlsad_core::mrf::sample_level0(
            count,
            cfg.dataset.image_side,
            cfg.dataset.channels,
            &mut source.stream(streams::PROBE),
        ),
    };

    let probe_cfg = cfg.probe_config(mode);
    let report = fooling_search(&mut bank, &init, &normal_scores, &probe_cfg)?;
    viz::export_probe_grid(&init, &report.final_images, &probe_dir.join("grid.png"))?;

    let mut text = String::from("image,init_score,final_score,threshold,success,first_success_step\n");
    for i in 0..report.final_scores.len() {
        text.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            report.initial_scores[i],
            report.final_scores[i],
            report.threshold,
            report.success[i],
            report.first_success_step[i].map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
        ));
    }
    std::fs::write(&report_path, &text)?;
    let ok = report.success.iter().filter(|&&s| s).count();
    println!(
        "probe: {ok}/{} images below the {}th-percentile threshold {:.6} after {} steps",
        report.success.len(),
        probe_cfg.percentile,
        report.threshold,
        report.steps_used
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

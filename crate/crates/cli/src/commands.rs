//! The subcommands. Each takes a resolved [`RunConfig`], holds the output
//! directory lock while it runs and returns a summary of what it wrote.

use crate::config::{ModeChoice, RunConfig, SplitName};
use crate::error::{CliError, CliResult};
use crate::output::{csv_rows, to_json, write_resolved_config, write_text, DirLock, Stamp};
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};
use stereovae::geometry::ops;
use stereovae::harness::data::{read_png, write_image_png, write_mask_png, DatasetIndex};
use stereovae::harness::experiments::{grid_csv, interpolation_csv};
use stereovae::harness::metrics::anomaly_mass;
use stereovae::harness::{
    detect, eval_metrics, gen_synthetic, interpolate_pair, load_any, pixel_errors, roc_auc, score_grid,
    split_indices, subsample_anomalies, write_dataset, AnomalyReport, ImageSet, InterpolationMode, Label, Splits,
};
use stereovae::rng::SeededRng;
use stereovae::spvae::{history_csv, HistoryRow, SpVaeModel};
use stereovae::svdd::{FinetuneRow, SvddModel};
use stereovae::Error;

pub const VAE_CHECKPOINT: &str = "vae_checkpoint";
pub const SVDD_CHECKPOINT: &str = "svdd_checkpoint";

/// Generated or loaded images, after anomaly subsampling.
pub fn load_data(cfg: &RunConfig) -> CliResult<ImageSet> {
    let root = SeededRng::new(cfg.data_seed());
    let set = match (&cfg.dataset.synthetic, &cfg.dataset.dir) {
        (Some(spec), None) => gen_synthetic(spec, &mut root.substream(0))?,
        (None, Some(dir)) => load_any(dir, cfg.dataset.tile)?,
        _ => return Err(CliError::Config("exactly one dataset source is required".into())),
    };
    match cfg.dataset.anomaly_ratio {
        Some(r) => Ok(subsample_anomalies(&set, r, &mut root.substream(1))?),
        None => Ok(set),
    }
}

pub fn split_data(cfg: &RunConfig, set: &ImageSet) -> CliResult<Splits> {
    let s = &cfg.splits;
    let mut rng = SeededRng::new(cfg.data_seed()).substream(2);
    Ok(split_indices(set, s.train, s.val, s.contaminate, &mut rng)?)
}

fn pick<'a>(splits: &'a Splits, name: SplitName) -> CliResult<&'a [usize]> {
    let (idx, label) = match name {
        SplitName::Train => (&splits.train, "train"),
        SplitName::Val => (&splits.val, "val"),
        SplitName::Test => (&splits.test, "test"),
    };
    if idx.is_empty() {
        return Err(Error::EmptyInput(format!("the {label} split is empty")).into());
    }
    Ok(idx)
}

fn split_of(splits: &Splits, i: usize) -> &'static str {
    if splits.train.binary_search(&i).is_ok() {
        "train"
    } else if splits.val.binary_search(&i).is_ok() {
        "val"
    } else {
        "test"
    }
}

fn check_size(set: &ImageSet, size: usize) -> CliResult<()> {
    if (set.height(), set.width()) != (size, size) {
        return Err(Error::Shape(format!(
            "expected {size}x{size} images, got {}x{}",
            set.height(),
            set.width()
        ))
        .into());
    }
    Ok(())
}

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn label_name(l: Option<Label>) -> &'static str {
    match l {
        Some(Label::Normal) => "normal",
        Some(Label::Anomalous) => "anomalous",
        None => "",
    }
}

fn checkpoint_dir(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("no checkpoint given".into()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub images: usize,
    pub masks: usize,
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<GenSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let set = load_data(cfg)?;
    let spec = json!({
        "synthetic": cfg.dataset.synthetic,
        "anomaly_ratio": cfg.dataset.anomaly_ratio,
        "seed": cfg.data_seed(),
        "config_hash": stamp.config_hash,
    });
    let index: DatasetIndex = write_dataset(out, &set, spec)?;
    let masks = index.files.iter().filter(|f| f.mask.is_some()).count();
    log::info!("wrote {} images and {masks} masks to {}", set.len(), out.display());
    Ok(GenSummary {
        stamp,
        images: set.len(),
        masks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Relative to the output directory.
    pub checkpoint: String,
    pub resumed_from: Option<usize>,
    pub epoch: usize,
    pub beta: f64,
    pub history: Vec<HistoryRow>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

fn ids(set: &ImageSet, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| set.ids()[i].clone()).collect()
}

pub fn cmd_train_vae(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let set = load_data(cfg)?;
    check_size(&set, cfg.vae.image_size)?;
    let splits = split_data(cfg, &set)?;
    let ckpt = out.join(VAE_CHECKPOINT);
    let history_path = out.join("history.csv");
    let (mut model, resumed_from) = if cfg.resume && ckpt.join("manifest.json").is_file() {
        let mut m = SpVaeModel::load(&ckpt)?;
        let mut expected = cfg.vae.clone();
        expected.max_epochs = m.config().max_epochs;
        if *m.config() != expected {
            return Err(CliError::Config(
                "resume config differs from the checkpoint in more than max_epochs".into(),
            ));
        }
        m.set_max_epochs(cfg.vae.max_epochs);
        let e = m.epoch();
        log::info!("resuming from epoch {e}");
        (m, Some(e))
    } else {
        (SpVaeModel::new(cfg.vae.clone())?, None)
    };
    let train = set.tensor(&splits.train);
    let val = (!splits.val.is_empty()).then(|| set.tensor(&splits.val));
    let history = model.fit(&train, val.as_ref())?;

    let mut lines: Vec<String> = Vec::new();
    if let Some(start) = resumed_from {
        if let Ok(old) = std::fs::read_to_string(&history_path) {
            lines.extend(
                csv_rows(&old)
                    .filter(|r| r[0].parse::<usize>().is_ok_and(|e| e <= start))
                    .map(|r| r.join(",")),
            );
        }
    }
    let fresh = history_csv(&history);
    let mut fresh_lines = fresh.lines();
    let header = fresh_lines.next().unwrap_or_default().to_string();
    lines.extend(fresh_lines.map(str::to_string));
    let mut text = stamp.csv_header();
    text.push_str(&header);
    text.push('\n');
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    write_text(&history_path, &text)?;

    model.save(
        &ckpt,
        json!({
            "config_hash": stamp.config_hash,
            "seed": stamp.seed,
            "epoch": model.epoch(),
            "beta": model.beta().beta,
        }),
    )?;
    let split_ids = json!({
        "config_hash": stamp.config_hash,
        "seed": stamp.seed,
        "train": ids(&set, &splits.train),
        "val": ids(&set, &splits.val),
        "test": ids(&set, &splits.test),
    });
    write_text(&out.join("splits.json"), &to_json(&split_ids)?)?;
    let summary = TrainSummary {
        stamp,
        checkpoint: VAE_CHECKPOINT.into(),
        resumed_from,
        epoch: model.epoch(),
        beta: model.beta().beta,
        history,
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
    };
    write_text(&out.join("train-vae.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub checkpoint: PathBuf,
    pub metric: stereovae::harness::ErrorMetric,
    pub stats_split: SplitName,
    pub tau: f64,
    pub mu_rec: f64,
    pub sigma_rec: f64,
    /// Threshold on image anomaly mass.
    pub image_tau: f64,
    pub image_mu: f64,
    pub image_sigma: f64,
    pub n_reference: usize,
    pub n_test: usize,
    pub n_flagged: usize,
    /// Image-level precision, recall and F1, and pixel IoU on the anomalous
    /// subset; absent without ground truth.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub report: Option<AnomalyReport>,
}

pub fn cmd_score(cfg: &RunConfig) -> CliResult<ScoreSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let ckpt = checkpoint_dir(cfg)?;
    let model = SpVaeModel::load(ckpt)?;
    let set = load_data(cfg)?;
    check_size(&set, model.config().image_size)?;
    let splits = split_data(cfg, &set)?;
    let reference = pick(&splits, cfg.score.stats_split)?;
    let test = pick(&splits, SplitName::Test)?;
    let (metric, batch) = (cfg.score.metric, cfg.score.batch_size);
    let ref_err = pixel_errors(&model, &set, reference, metric, batch)?;
    let test_err = pixel_errors(&model, &set, test, metric, batch)?;
    let det = detect(&ref_err, &test_err)?;

    let mut csv = stamp.csv_header();
    csv.push_str("id,role,split,label,pixels,error_sum,error_sumsq,mass,flagged,mask\n");
    let mut row = |i: usize, role: &str, e: &[f64], mass: f64, flagged: bool, mask: &str| {
        let sum: f64 = e.iter().sum();
        let sumsq: f64 = e.iter().map(|v| v * v).sum();
        csv.push_str(&format!(
            "{},{role},{},{},{},{sum},{sumsq},{mass},{},{mask}\n",
            set.ids()[i],
            split_of(&splits, i),
            label_name(set.label(i)),
            e.len(),
            flagged as u8
        ));
    };
    for (&i, e) in reference.iter().zip(&ref_err) {
        let mass = anomaly_mass(e, det.pixel.tau);
        row(i, "reference", e, mass, mass > det.image.tau, "");
    }
    let (h, w) = (set.height(), set.width());
    make_dir(&out.join("masks"))?;
    for (j, (&i, e)) in test.iter().zip(&test_err).enumerate() {
        let name = format!("masks/{j:05}.png");
        write_mask_png(&out.join(&name), h, w, &det.masks[j])?;
        row(i, "test", e, det.masses[j], det.flags[j], &name);
    }
    write_text(&out.join("scores.csv"), &csv)?;

    let report = match (set.labels(), set.masks()) {
        (Some(_), Some(masks)) => {
            let truth: Vec<bool> = test.iter().map(|&i| set.label(i) == Some(Label::Anomalous)).collect();
            let true_masks: Vec<Vec<bool>> = test.iter().map(|&i| masks[i].clone()).collect();
            Some(eval_metrics(&det.flags, &truth, &det.masks, &true_masks)?)
        }
        _ => None,
    };
    let summary = ScoreSummary {
        stamp,
        checkpoint: ckpt.to_path_buf(),
        metric,
        stats_split: cfg.score.stats_split,
        tau: det.pixel.tau,
        mu_rec: det.pixel.mu,
        sigma_rec: det.pixel.sigma,
        image_tau: det.image.tau,
        image_mu: det.image.mu,
        image_sigma: det.image.sigma,
        n_reference: reference.len(),
        n_test: test.len(),
        n_flagged: det.flags.iter().filter(|&&f| f).count(),
        precision: report.as_ref().map(|r| r.image.precision),
        recall: report.as_ref().map(|r| r.image.recall),
        f1: report.as_ref().map(|r| r.image.f1),
        iou: report.as_ref().map(|r| r.iou),
        report,
    };
    write_text(&out.join("metrics.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SvddSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    /// Relative to the output directory.
    pub checkpoint: String,
    pub curvature: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    pub radius_split: SplitName,
    /// Share of the radius split scoring above the radius.
    pub flagged_fraction: f64,
    pub auc_test: Option<f64>,
    pub auc_all: Option<f64>,
    pub pretrain_loss: Vec<f64>,
    pub finetune: Vec<FinetuneRow>,
    pub grid: Option<String>,
}

fn auc_over(scores: &[f64], set: &ImageSet, idx: &[usize]) -> Option<f64> {
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let p: Vec<bool> = idx.iter().map(|&i| set.label(i) == Some(Label::Anomalous)).collect();
    roc_auc(&s, &p).ok()
}

pub fn cmd_svdd(cfg: &RunConfig) -> CliResult<SvddSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let set = load_data(cfg)?;
    check_size(&set, cfg.svdd.image_size)?;
    let splits = split_data(cfg, &set)?;
    let radius_idx = pick(&splits, cfg.radius_split)?.to_vec();
    let mut model = SvddModel::new(cfg.svdd.clone())?;
    let (pretrain_loss, finetune) = model.train(&set.tensor(&splits.train))?;
    let mut scores = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(256) {
        scores.extend(model.score(&set.tensor(chunk))?);
    }
    let ref_scores: Vec<f64> = radius_idx.iter().map(|&i| scores[i]).collect();
    let radius = model.fit_radius(&ref_scores)?;
    let flagged_fraction = ref_scores.iter().filter(|&&s| s > radius).count() as f64 / ref_scores.len() as f64;

    let mut csv = stamp.csv_header();
    csv.push_str("id,split,label,score,flagged\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{s},{}\n",
            set.ids()[i],
            split_of(&splits, i),
            label_name(set.label(i)),
            (*s > radius) as u8
        ));
    }
    write_text(&out.join("svdd_scores.csv"), &csv)?;

    let grid = match &cfg.grid {
        Some(g) => {
            let points = score_grid(&model, (g.lo, g.hi), g.resolution)?;
            let name = "svdd_grid.csv";
            write_text(&out.join(name), &(stamp.csv_header() + &grid_csv(&points)))?;
            Some(name.to_string())
        }
        None => None,
    };
    let ckpt = out.join(SVDD_CHECKPOINT);
    model.save(
        &ckpt,
        json!({ "config_hash": stamp.config_hash, "seed": stamp.seed }),
    )?;
    let center = model
        .center()
        .map(|c| c.coords().to_vec())
        .ok_or_else(|| Error::State("center missing after training".into()))?;
    let summary = SvddSummary {
        stamp,
        checkpoint: SVDD_CHECKPOINT.into(),
        curvature: cfg.svdd.curvature,
        center,
        radius,
        radius_split: cfg.radius_split,
        flagged_fraction,
        auc_test: auc_over(&scores, &set, &splits.test),
        auc_all: auc_over(&scores, &set, &all),
        pretrain_loss,
        finetune,
        grid,
    };
    write_text(&out.join("svdd.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct PathSummary {
    pub mode: InterpolationMode,
    pub clamped: usize,
    /// Latent distances between consecutive points.
    pub steps: Vec<f64>,
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolateSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub checkpoint: PathBuf,
    pub n: usize,
    pub paths: Vec<PathSummary>,
}

fn read_input(path: &Path, size: usize) -> CliResult<Vec<f64>> {
    let (h, w, px) = read_png(path)?;
    if (h, w) != (size, size) {
        return Err(Error::Shape(format!(
            "{}: expected {size}x{size}, got {h}x{w}",
            path.display()
        ))
        .into());
    }
    Ok(px)
}

pub fn cmd_interpolate(cfg: &RunConfig) -> CliResult<InterpolateSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let ckpt = checkpoint_dir(cfg)?;
    let model = SpVaeModel::load(ckpt)?;
    let s = model.config().image_size;
    let ic = &cfg.interpolate;
    let missing = || CliError::Config("interpolate needs image_a and image_b".into());
    let xa = read_input(ic.image_a.as_deref().ok_or_else(missing)?, s)?;
    let xb = read_input(ic.image_b.as_deref().ok_or_else(missing)?, s)?;
    let modes = match ic.mode {
        ModeChoice::Geodesic => vec![InterpolationMode::Geodesic],
        ModeChoice::Linear => vec![InterpolationMode::Linear],
        ModeChoice::Both => vec![InterpolationMode::Geodesic, InterpolationMode::Linear],
    };
    let k = model.curvature();
    make_dir(&out.join("frames"))?;
    let mut runs = Vec::new();
    let mut paths = Vec::new();
    for mode in modes {
        let run = interpolate_pair(&model, &xa, &xb, ic.n, mode)?;
        let name = match mode {
            InterpolationMode::Geodesic => "geodesic",
            InterpolationMode::Linear => "linear",
        };
        let mut frames = Vec::new();
        for i in 0..ic.n {
            let f = format!("frames/{name}_{i:02}.png");
            write_image_png(&out.join(&f), s, s, run.frames.sample(i))?;
            frames.push(f);
        }
        paths.push(PathSummary {
            mode,
            clamped: run.clamped,
            steps: run.latents.windows(2).map(|p| ops::distance(k, &p[0], &p[1])).collect(),
            frames,
        });
        runs.push(run);
    }
    write_text(
        &out.join("interpolation.csv"),
        &(stamp.csv_header() + &interpolation_csv(&runs)),
    )?;
    let summary = InterpolateSummary {
        stamp,
        checkpoint: ckpt.to_path_buf(),
        n: ic.n,
        paths,
    };
    write_text(&out.join("interpolation.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub checkpoint: PathBuf,
    pub points: usize,
}

pub fn cmd_grid(cfg: &RunConfig) -> CliResult<GridSummary> {
    let out = cfg.output_dir();
    let _lock = DirLock::acquire(out)?;
    let stamp = write_resolved_config(cfg)?;
    let ckpt = checkpoint_dir(cfg)?;
    let model = SvddModel::load(ckpt)?;
    let g = cfg.grid.clone().unwrap_or_default();
    let points = score_grid(&model, (g.lo, g.hi), g.resolution)?;
    write_text(&out.join("grid.csv"), &(stamp.csv_header() + &grid_csv(&points)))?;
    Ok(GridSummary {
        stamp,
        checkpoint: ckpt.to_path_buf(),
        points: points.len(),
    })
}

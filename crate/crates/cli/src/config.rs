//! Run configuration: JSON file plus command-line overrides.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use stereovae::harness::{ErrorMetric, SyntheticSpec};
use stereovae::spvae::SpVaeConfig;
use stereovae::svdd::SvddConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Gen,
    TrainVae,
    Svdd,
    Score,
    Interpolate,
    Grid,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Gen => "gen",
            Task::TrainVae => "train-vae",
            Task::Svdd => "svdd",
            Task::Score => "score",
            Task::Interpolate => "interpolate",
            Task::Grid => "grid",
        }
    }
}

/// Image source. Exactly one of `synthetic` and `dir` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub synthetic: Option<SyntheticSpec>,
    /// Dataset directory with `index.json`, or a plain directory of PNGs.
    pub dir: Option<PathBuf>,
    /// Tile size for plain PNG directories; 0 keeps whole images.
    pub tile: usize,
    /// Keep `round(ratio·n_normal)` anomalous images.
    pub anomaly_ratio: Option<f64>,
    /// Seed for generation and subsampling; defaults to the run seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fractions of the normal images.
    pub train: f64,
    pub val: f64,
    /// Split anomalous images with the same fractions instead of sending
    /// all of them to test.
    pub contaminate: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            contaminate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    #[default]
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub metric: ErrorMetric,
    /// Split whose pixels give μ_rec and σ_rec.
    pub stats_split: SplitName,
    pub batch_size: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            metric: ErrorMetric::Squared,
            stats_split: SplitName::Val,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Geodesic,
    Linear,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateConfig {
    pub image_a: Option<PathBuf>,
    pub image_b: Option<PathBuf>,
    pub n: usize,
    pub mode: ModeChoice,
}

impl Default for InterpolateConfig {
    fn default() -> Self {
        Self {
            image_a: None,
            image_b: None,
            n: 10,
            mode: ModeChoice::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -1.0,
            hi: 1.0,
            resolution: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Option<Task>,
    /// Overrides the curvature of both model sections.
    pub curvature: Option<f64>,
    /// Overrides the latent dimension of both model sections.
    pub latent_dim: Option<usize>,
    pub seed: u64,
    /// Not part of the resolved config file or its hash.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub splits: SplitConfig,
    pub vae: SpVaeConfig,
    pub svdd: SvddConfig,
    pub score: ScoreConfig,
    /// Split whose scores set the SVDD radius.
    pub radius_split: SplitName,
    /// Score grid written by `svdd` when set, and read by `grid`.
    pub grid: Option<GridConfig>,
    pub interpolate: InterpolateConfig,
    /// Model checkpoint directory for `score`, `interpolate` and `grid`.
    pub checkpoint: Option<PathBuf>,
    /// Continue training from the checkpoint in the output directory.
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            curvature: None,
            latent_dim: None,
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::default(),
            splits: SplitConfig::default(),
            vae: SpVaeConfig::default(),
            svdd: SvddConfig::default(),
            score: ScoreConfig::default(),
            radius_split: SplitName::Val,
            grid: None,
            interpolate: InterpolateConfig::default(),
            checkpoint: None,
            resume: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the top-level overrides to the model sections, pins the
    /// task and validates everything before any compute.
    pub fn resolve(mut self, task: Task) -> CliResult<Self> {
        if let Some(t) = self.task {
            if t != task {
                return Err(CliError::Config(format!(
                    "config is for task {}, command is {}",
                    t.name(),
                    task.name()
                )));
            }
        }
        self.task = Some(task);
        if let Some(k) = self.curvature {
            self.vae.curvature = k;
            self.svdd.curvature = k;
        }
        if let Some(d) = self.latent_dim {
            self.vae.latent_dim = d;
            self.svdd.latent_dim = d;
        }
        self.vae.seed = self.seed;
        self.svdd.seed = self.seed;
        match task {
            Task::Svdd | Task::Grid => {
                self.curvature = Some(self.svdd.curvature);
                self.latent_dim = Some(self.svdd.latent_dim);
            }
            _ => {
                self.curvature = Some(self.vae.curvature);
                self.latent_dim = Some(self.vae.latent_dim);
            }
        }
        if self.output_dir.is_none() {
            return Err(CliError::Config("no output directory given".into()));
        }
        self.validate(task)?;
        Ok(self)
    }

    fn validate(&self, task: Task) -> CliResult<()> {
        let needs_data = matches!(task, Task::Gen | Task::TrainVae | Task::Svdd | Task::Score);
        let d = &self.dataset;
        if needs_data {
            match (&d.synthetic, &d.dir) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Config("dataset sets both `synthetic` and `dir`".into()))
                }
                (None, None) => return Err(CliError::Config("no dataset source given".into())),
                _ => {}
            }
        }
        if task == Task::Gen && d.synthetic.is_none() {
            return Err(CliError::Config("gen needs a synthetic dataset spec".into()));
        }
        if let Some(s) = &d.synthetic {
            s.validate()?;
        }
        if let Some(r) = d.anomaly_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(CliError::Config(format!("anomaly_ratio {r} must be positive")));
            }
        }
        match task {
            Task::TrainVae | Task::Score => self.vae.validate()?,
            Task::Svdd => self.svdd.validate()?,
            _ => {}
        }
        if self.score.batch_size == 0 {
            return Err(CliError::Config("score batch_size must be positive".into()));
        }
        if matches!(task, Task::Score | Task::Interpolate | Task::Grid) && self.checkpoint.is_none() {
            return Err(CliError::Config(format!("{} needs a checkpoint", task.name())));
        }
        if task == Task::Interpolate {
            let i = &self.interpolate;
            if i.image_a.is_none() || i.image_b.is_none() {
                return Err(CliError::Config("interpolate needs image_a and image_b".into()));
            }
            if i.n < 2 {
                return Err(CliError::Config(format!("interpolate needs n ≥ 2, got {}", i.n)));
            }
        }
        if task == Task::Svdd && self.grid.is_some() && self.svdd.latent_dim != 2 {
            return Err(CliError::Config(format!(
                "a score grid needs latent_dim 2, got {}",
                self.svdd.latent_dim
            )));
        }
        if let Some(g) = &self.grid {
            if !(g.lo < g.hi) || g.resolution < 2 {
                return Err(CliError::Config("grid needs lo < hi and resolution ≥ 2".into()));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new("."))
    }

    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }
}

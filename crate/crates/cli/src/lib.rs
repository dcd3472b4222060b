//! Command-line runner: configs, datasets, training, scoring and
//! experiments with reproducible artifacts.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_gen, cmd_grid, cmd_interpolate, cmd_score, cmd_svdd, cmd_train_vae};
pub use config::{RunConfig, Task};
pub use error::{CliError, CliResult};

use clap::{Args, Parser, Subcommand};
use config::{GridConfig, ModeChoice, SplitName};
use std::path::PathBuf;
use stereovae::harness::ErrorMetric;

#[derive(Debug, Parser)]
#[command(name = "stereovae", version, about = "Constant-curvature VAE and SVDD anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Gen(Overrides),
    /// Train an SP-VAE.
    TrainVae(Overrides),
    /// Train a Deep SVDD model and score the dataset.
    Svdd(Overrides),
    /// Threshold reconstruction errors of a trained SP-VAE.
    Score(Overrides),
    /// Decode points between the latent means of two images.
    Interpolate(Overrides),
    /// SVDD scores on a 2-D latent grid.
    Grid(Overrides),
}

impl Command {
    pub fn task(&self) -> Task {
        match self {
            Command::Gen(_) => Task::Gen,
            Command::TrainVae(_) => Task::TrainVae,
            Command::Svdd(_) => Task::Svdd,
            Command::Score(_) => Task::Score,
            Command::Interpolate(_) => Task::Interpolate,
            Command::Grid(_) => Task::Grid,
        }
    }

    pub fn overrides(&self) -> &Overrides {
        match self {
            Command::Gen(o)
            | Command::TrainVae(o)
            | Command::Svdd(o)
            | Command::Score(o)
            | Command::Interpolate(o)
            | Command::Grid(o) => o,
        }
    }
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown split {s}"))
}

fn parse_metric(s: &str) -> Result<ErrorMetric, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown metric {s}"))
}

fn parse_mode(s: &str) -> Result<ModeChoice, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown mode {s}"))
}

/// Flags mirror config keys and win over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Dataset directory; replaces any synthetic spec.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub anomaly_ratio: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    /// Batch size of both models.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of both models.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_split)]
    pub stats_split: Option<SplitName>,
    #[arg(long, value_parser = parse_metric)]
    pub metric: Option<ErrorMetric>,
    #[arg(long, value_parser = parse_split)]
    pub radius_split: Option<SplitName>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub image_a: Option<PathBuf>,
    #[arg(long)]
    pub image_b: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModeChoice>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_hi: Option<f64>,
    #[arg(long)]
    pub grid_resolution: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut c: RunConfig) -> RunConfig {
        macro_rules! set {
            ($flag:expr => $($dst:expr),+) => {
                if let Some(v) = $flag.clone() {
                    $($dst = v.clone().into();)+
                }
            };
        }
        set!(self.output_dir => c.output_dir);
        set!(self.seed => c.seed);
        set!(self.curvature => c.curvature);
        set!(self.latent_dim => c.latent_dim);
        if let Some(d) = &self.data_dir {
            c.dataset.dir = Some(d.clone());
            c.dataset.synthetic = None;
        }
        set!(self.tile => c.dataset.tile);
        set!(self.anomaly_ratio => c.dataset.anomaly_ratio);
        set!(self.max_epochs => c.vae.max_epochs);
        set!(self.pretrain_epochs => c.svdd.pretrain_epochs);
        set!(self.finetune_epochs => c.svdd.finetune_epochs);
        set!(self.batch_size => c.vae.batch_size, c.svdd.batch_size);
        set!(self.lr => c.vae.lr, c.svdd.lr);
        set!(self.stats_split => c.score.stats_split);
        set!(self.metric => c.score.metric);
        set!(self.radius_split => c.radius_split);
        set!(self.checkpoint => c.checkpoint);
        if self.resume {
            c.resume = true;
        }
        set!(self.image_a => c.interpolate.image_a);
        set!(self.image_b => c.interpolate.image_b);
        set!(self.n => c.interpolate.n);
        set!(self.mode => c.interpolate.mode);
        if self.grid_lo.is_some() || self.grid_hi.is_some() || self.grid_resolution.is_some() {
            let g = c.grid.get_or_insert_with(GridConfig::default);
            set!(self.grid_lo => g.lo);
            set!(self.grid_hi => g.hi);
            set!(self.grid_resolution => g.resolution);
        }
        c
    }

    /// File config (or defaults) with the flags applied, resolved for `task`.
    pub fn resolve(&self, task: Task) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        self.apply(base).resolve(task)
    }
}

/// Runs a resolved config and returns the JSON summary of its outputs.
pub fn run_task(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    let task = cfg
        .task
        .ok_or_else(|| CliError::Config("config is not resolved to a task".into()))?;
    let v = match task {
        Task::Gen => serde_json::to_value(cmd_gen(cfg)?),
        Task::TrainVae => serde_json::to_value(cmd_train_vae(cfg)?),
        Task::Svdd => serde_json::to_value(cmd_svdd(cfg)?),
        Task::Score => serde_json::to_value(cmd_score(cfg)?),
        Task::Interpolate => serde_json::to_value(cmd_interpolate(cfg)?),
        Task::Grid => serde_json::to_value(cmd_grid(cfg)?),
    };
    v.map_err(|e| CliError::Core(stereovae::Error::State(e.to_string())))
}

/// Caps the worker pool from `GYRO_THREADS` when it holds a positive count.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("GYRO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("GYRO_THREADS={v} is not a positive integer")))?;
    // A pool that is already built keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

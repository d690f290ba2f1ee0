//! `dood`: train, evaluate and run tasks with stroke-based generative models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dood", version, about = "Stroke-based generative models of drawings")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration. Defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.beta=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Checkpoint to load.
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    /// Dataset name or path; overrides `data.name`.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Loader threads; overrides `data.workers`.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model, writing metrics and checkpoints.
    Train {
        /// Total optimisation steps; overrides `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Importance-weighted estimate of the marginal likelihood.
    EvalMll {
        /// Importance samples per image; overrides `eval.iwae_k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Reconstruct dataset images through the recognition model.
    Reconstruct,
    /// Sample images from the prior.
    Sample {
        #[arg(long, default_value_t = 36)]
        count: usize,
        /// Prior temperature in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        temperature: f32,
    },
    /// Complete the top part of dataset images.
    Complete {
        /// Fraction of rows kept as the partial drawing.
        #[arg(long, default_value_t = 0.5)]
        keep: f64,
    },
    /// Draw new exemplars of dataset characters.
    Exemplars {
        /// Exemplars per image.
        #[arg(long, default_value_t = 9)]
        per_image: usize,
        /// Reuse one type sample for all exemplars of an image.
        #[arg(long)]
        shared: bool,
    },
    /// One-shot classification over episodes.
    Classify {
        /// Episode manifest (`episode<TAB>support|query<TAB>path<TAB>label`).
        /// Without one, episodes are drawn from the model's own tokens.
        #[arg(long)]
        episodes: Option<PathBuf>,
        /// Type samples per support; overrides `classify.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Invert manifest images (dark ink on light paper).
        #[arg(long)]
        invert: bool,
        /// Classes per generated episode.
        #[arg(long, default_value_t = 5)]
        ways: usize,
        /// Number of generated episodes.
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Cluster inferred strokes.
    Cluster {
        /// Number of clusters; overrides `eval.cluster_k`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the synthetic spline dataset as PNGs.
    MakeSynthetic,
}

/// Error kinds with distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Run(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

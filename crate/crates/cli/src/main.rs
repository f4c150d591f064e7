//! `lumikit` command-line tool.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bad arguments or unreadable inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "lumikit", version, about = "Dynamic inverse rendering with Gaussian splats")]
pub struct Cli {
    /// Worker threads (defaults to LUMIKIT_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a synthetic dataset from a scene spec.
    GenScene {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model to a dataset.
    Train(TrainArgs),
    /// Shade a trained model under a new environment map.
    Relight {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: PathBuf,
        /// Rotation of the environment about the up axis, in degrees.
        #[arg(long, default_value_t = 0.0)]
        env_rotation: f64,
        #[arg(long)]
        cam: PathBuf,
        /// Camera index when the camera file holds a list.
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        rays: usize,
    },
    /// Compare predicted images against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        kind: EvalKind,
        /// Optional directory of PGM masks (same names, .pgm) for aligned albedo.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write albedo, roughness, normal, depth and gate maps of a model.
    RenderMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cam: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalKind {
    Albedo,
    Relight,
    Roughness,
    Envmap,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory (a gen-scene output root selects its dynamic capture).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: Stage,
    /// Stage-1 checkpoint for `--stage 2` (defaults to --out).
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// JSON file with (a subset of) the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    #[arg(long)]
    pub stage2_iters: Option<usize>,
    /// Separation loss weight.
    #[arg(long)]
    pub sep_weight: Option<f64>,
    /// Iteration at which the separation loss switches on.
    #[arg(long)]
    pub sep_start: Option<usize>,
    /// Treat every splat as dynamic (gate fixed to 1).
    #[arg(long)]
    pub no_gate: bool,
    /// Disable the color change head.
    #[arg(long)]
    pub no_deltac: bool,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, UsageError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("LUMIKIT_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| UsageError(format!("LUMIKIT_THREADS={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

/// Exit code for an error: 3 for numeric failure, 2 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(lumikit::Error::NumericFailure { .. }) = cause.downcast_ref::<lumikit::Error>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> anyhow::Result<()> {
        if let Some(n) = thread_count(cli.threads)? {
            if n == 0 {
                return Err(UsageError("--threads must be at least 1".into()).into());
            }
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        }
        commands::run(&cli.command)
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

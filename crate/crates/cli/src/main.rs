mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

/// Degeneracy-aware LiDAR localization on synthetic or recorded data.
///
/// Exit codes: 0 success, 1 output failure, 2 config or parse error,
/// 3 registration infeasible, 4 more than half of the scans failed.
#[derive(Debug, Parser)]
#[command(name = "obsloc", version)]
struct Cli {
    /// Seed for everything random; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate map, scans, ground truth and priors from a `[scene]` config.
    Synth,
    /// Register one scan against a target cloud.
    Register(RegisterArgs),
    /// Localize a scan sequence against a map.
    Localize(LocalizeArgs),
    /// Trajectory error and map outlier rate against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Source scan (PLY or PCD).
    pub source: PathBuf,
    /// Target cloud; normals are estimated when absent.
    pub target: PathBuf,
    /// Initial pose as `x,y,z,qx,qy,qz,qw`.
    #[arg(long, value_delimiter = ',', num_args = 7, allow_negative_numbers = true)]
    pub init: Option<Vec<f64>>,
    /// Write `degeneracy.json` and `observability.ply` into this directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Neighborhood size for normal estimation on the target.
    #[arg(long, default_value_t = obsloc_core::pointcloud::DEFAULT_NORMAL_K)]
    pub normal_k: usize,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Ignore the priors: registration only, constant-pose prediction.
    #[arg(long)]
    pub no_prior: bool,
    /// Observability scan for every Nth scan (0 disables); overrides the config.
    #[arg(long)]
    pub every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    pub est: PathBuf,
    /// Ground-truth trajectory (TUM).
    #[arg(long)]
    pub gt: PathBuf,
    /// Map built from the estimated poses.
    #[arg(long, requires = "gt_map")]
    pub built_map: Option<PathBuf>,
    /// Ground-truth map the built map is checked against.
    #[arg(long, requires = "built_map")]
    pub gt_map: Option<PathBuf>,
    /// Distance (m) beyond which a built-map point counts as an outlier.
    #[arg(long, default_value_t = obsloc_core::evaluation::DEFAULT_OUTLIER_THRESHOLD)]
    pub threshold: f64,
    /// Maximum timestamp difference (s) when associating poses.
    #[arg(long, default_value_t = 0.01)]
    pub max_dt: f64,
    /// Compare raw positions instead of rigidly aligning the estimate first.
    #[arg(long)]
    pub no_align: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let globals = commands::Globals {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
    };
    match cli.command {
        Command::Synth => commands::synth(&globals),
        Command::Register(args) => commands::register(&globals, &args),
        Command::Localize(args) => commands::localize(&globals, &args),
        Command::Eval(args) => commands::eval(&globals, &args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

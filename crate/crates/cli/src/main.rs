//! `radar-tr`: teach, repeat, simulate and evaluate from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 3 input or data error, 4 flagged
//! frames under `--strict`.

mod commands;
mod manifest;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use radar_tr::Ablation;

use overrides::PipelineOverrides;

#[derive(Debug, Parser)]
#[command(name = "radar-tr", version = manifest::BUILD_ID, about = "Spinning-radar teach and repeat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render polar scans of a simulated world along a trajectory.
    Simulate(SimulateArgs),
    /// Build a map from a scan sequence with radar odometry.
    Teach(TeachArgs),
    /// Localize a scan sequence against a map.
    Repeat(RepeatArgs),
    /// Compute drift or localization error reports from CSV files.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the files of a built-in simulation scenario.
    Scenario(ScenarioArgs),
}

/// Options shared by `teach` and `repeat`.
#[derive(Debug, Args)]
struct RunArgs {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Disable one compensation stage.
    #[arg(long, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    /// Preprocess each scan on the thread pool; results are unchanged.
    #[arg(long)]
    parallel: bool,
    /// Exit with status 4 if any frame's registration failed.
    #[arg(long)]
    strict: bool,
    /// Write every registration iteration to this CSV file.
    #[arg(long, value_name = "CSV")]
    dump_iterations: Option<PathBuf>,
    #[command(flatten)]
    overrides: PipelineOverrides,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// World description (JSON).
    #[arg(long)]
    world: PathBuf,
    /// Sensor trajectory CSV (`time,x,y,theta`); one scan starts at each row.
    #[arg(long)]
    trajectory: PathBuf,
    /// Simulator settings (`key = value` lines); defaults when omitted.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Replaces the world's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Render scans on the thread pool; output is unchanged.
    #[arg(long)]
    parallel: bool,
    /// Output directory for scan files, `gt.csv` and `manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TeachArgs {
    /// Directory of `scan_*.rps` or `scan_*.csv` files.
    #[arg(long)]
    scans: PathBuf,
    /// Map file to write.
    #[arg(long)]
    map: PathBuf,
    /// Estimated trajectory CSV [default: next to the map, `.trajectory.csv`].
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Run manifest [default: next to the map, `.manifest.json`].
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("start").required(true).args(["init", "gt"]).multiple(true))]
struct RepeatArgs {
    /// Directory of repeat-pass scan files.
    #[arg(long)]
    scans: PathBuf,
    /// Map written by `teach`.
    #[arg(long)]
    map: PathBuf,
    /// Starting pose `x,y,theta` in the map frame.
    #[arg(long, value_parser = parse_pose, allow_hyphen_values = true)]
    init: Option<radar_tr::Pose2>,
    /// Repeat-pass ground truth CSV; gives the starting pose when `--init` is absent.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Teach-pass ground truth CSV; anchors `--gt` in the map frame and enables error evaluation.
    #[arg(long, requires = "gt")]
    teach_gt: Option<PathBuf>,
    /// Histogram bin width (meters, and degrees for heading).
    #[arg(long, default_value_t = 0.01)]
    bin_width: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_pose(s: &str) -> Result<radar_tr::Pose2, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected `x,y,theta`, got `{s}`"));
    }
    let mut v = [0.0_f64; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !slot.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(radar_tr::Pose2::new(v[0], v[1], v[2]))
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Translation and rotation drift over 100..800 m segments.
    Drift {
        /// Estimated trajectory CSV.
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory CSV with the same timestamps.
        #[arg(long)]
        gt: PathBuf,
        /// Report CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Longitudinal, lateral, overall and heading RMSE of per-frame errors.
    Rmse {
        /// CSV with `longitudinal,lateral,heading` columns.
        #[arg(long)]
        errors: PathBuf,
        /// Unit of the heading column.
        #[arg(long, value_enum, default_value_t = HeadingUnit::Deg)]
        heading_unit: HeadingUnit,
        /// Report CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Histogram CSV to write.
        #[arg(long)]
        histogram: Option<PathBuf>,
        /// Histogram bin width (meters, and degrees for heading).
        #[arg(long, default_value_t = 0.01)]
        bin_width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadingUnit {
    Deg,
    Rad,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario name.
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(radar_tr::scenarios::names()))]
    name: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// A failed run and the exit status it maps to.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Input(anyhow::Error),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Input(_) => 3,
            Failure::Divergence(_) => 4,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RADAR_TR_LOG_LEVEL", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Teach(a) => commands::teach(a),
        Command::Repeat(a) => commands::repeat(a),
        Command::Eval(e) => commands::eval(e),
        Command::Scenario(a) => commands::scenario(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(e) | Failure::Input(e) => eprintln!("error: {e:#}"),
                Failure::Divergence(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

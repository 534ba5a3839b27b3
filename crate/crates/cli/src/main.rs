//! `spim`: solve partitioning instances on the simulated optical Ising
//! machine, run the checkerboard demo, measure the noise floor, and run
//! benchmark and scaling suites.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spim::bench::SolverKind;
use spim::camera::NoisePreset;
use spim::SpimError;

use config::{Algorithm, Mode, ScheduleSection};

#[derive(Debug, Parser)]
#[command(name = "spim", version, about = "Spatial-photonic Ising machine simulator")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    /// Side of the centered readout window, in readout pixels; defaults to
    /// the spin lattice side.
    #[arg(long, global = true)]
    pub roi: Option<usize>,
    /// Spins per lattice side.
    #[arg(long, global = true)]
    pub spins: Option<usize>,
    /// Modulator pixels per spin side (multiple of 4).
    #[arg(long, global = true)]
    pub pixels_per_spin: Option<usize>,
    /// Noise preset: off or paper-like.
    #[arg(long, global = true, value_parser = parse_preset)]
    pub noise: Option<NoisePreset>,
    #[arg(long, global = true)]
    pub camera_bits: Option<u32>,
    /// Also render SVG line charts next to the CSVs.
    #[arg(long, global = true)]
    pub svg: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one instance with the adiabatic Metropolis-Hastings solver.
    Solve(SolveArgs),
    /// Reconstruct a checkerboard spin pattern from its captured image.
    Checkerboard(CheckerboardArgs),
    /// Mean cost of repeated captures of a fixed frame.
    NoiseFloor(NoiseFloorArgs),
    /// Run a benchmark suite over generated instances.
    Bench(BenchArgs),
    /// Mean best fidelity against problem size.
    Scaling(ScalingArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ScheduleArgs {
    /// Adiabatic schedule steps K.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub settle_iterations: Option<usize>,
    /// Total iteration budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Spins flipped per proposal.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
}

impl ScheduleArgs {
    fn section(&self) -> ScheduleSection {
        ScheduleSection {
            steps: self.steps,
            settle_iterations: self.settle_iterations,
            iterations: self.iterations,
            d: self.d,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Instance file: one number per line, or a JSON array.
    #[arg(long, conflicts_with = "n")]
    pub instance: Option<PathBuf>,
    /// Generate a random instance of this size instead.
    #[arg(long)]
    pub n: Option<usize>,
    /// Significant digits of generated numbers.
    #[arg(long)]
    pub digits: Option<u32>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckerboardArgs {
    #[arg(long, value_enum)]
    pub algorithm: Option<Algorithm>,
    /// Metropolis-Hastings iterations; the GA gets the same evaluation budget.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub elitism: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseFloorArgs {
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Comma-separated instance sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Seeds per size.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub digits: Option<u32>,
    /// Comma-separated solvers: spim, karmarkar_karp, exhaustive, random_search.
    #[arg(long, value_delimiter = ',', value_parser = parse_solver)]
    pub solvers: Option<Vec<SolverKind>>,
    #[arg(long)]
    pub random_samples: Option<usize>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ScalingArgs {
    /// Comma-separated perfect-square sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Seeds per size.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub digits: Option<u32>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

fn parse_preset(s: &str) -> Result<NoisePreset, String> {
    match s {
        "off" => Ok(NoisePreset::Off),
        "paper-like" | "paper_like" => Ok(NoisePreset::PaperLike),
        other => Err(format!("unknown noise preset {other:?} (expected off or paper-like)")),
    }
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    match s {
        "spim" => Ok(SolverKind::Spim),
        "karmarkar_karp" | "kk" => Ok(SolverKind::KarmarkarKarp),
        "exhaustive" => Ok(SolverKind::Exhaustive),
        "random_search" | "random" => Ok(SolverKind::RandomSearch),
        other => Err(format!("unknown solver {other:?}")),
    }
}

/// Command failure with its exit code: 2 for bad input, 1 otherwise.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Internal(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Failure::Internal(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<SpimError> for Failure {
    fn from(e: SpimError) -> Self {
        match e {
            SpimError::InvalidInstance(_)
            | SpimError::Dimension { .. }
            | SpimError::Schedule { .. }
            | SpimError::Geometry(_)
            | SpimError::InvalidArgument(_)
            | SpimError::Init(_)
            | SpimError::TooLarge { .. }
            | SpimError::Parse(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.common.config.as_deref()).and_then(|file| match &cli.command {
        Command::Solve(a) => commands::solve(&cli.common, &file, a),
        Command::Checkerboard(a) => commands::checkerboard(&cli.common, &file, a),
        Command::NoiseFloor(a) => commands::noise_floor(&cli.common, &file, a),
        Command::Bench(a) => commands::bench(&cli.common, &file, a),
        Command::Scaling(a) => commands::scaling(&cli.common, &file, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

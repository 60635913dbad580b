mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{InitName, PretrainMode};

/// Failure modes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(uniinit::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use uniinit::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(e) => match e {
                E::Config(_) | E::InvalidTask(_) | E::Domain(_) | E::DimensionMismatch { .. } => 2,
                E::Parse { .. } | E::Io { .. } | E::Checkpoint(_) | E::Csv(_) => 3,
                E::Divergence { .. } | E::NonFiniteGradient { .. } | E::NonFinite(_) => 4,
                E::UnsupportedPrimitive(_) => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<uniinit::Error> for CliError {
    fn from(e: uniinit::Error) -> Self {
        CliError::Lib(e)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "uniinit",
    version,
    about = "Pre-train, benchmark and diagnose uniformly spread initialisations"
)]
struct Cli {
    /// Worker threads (1 gives the bit-exact baseline; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a network and write its checkpoint and loss log.
    Pretrain(PretrainArgs),
    /// Fine-tune on random binary MNIST tasks and report test accuracy.
    Benchmark(BenchmarkArgs),
    /// Run a diagnostic probe on a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Sample a task suite and write it as a task file.
    MakeTasks(MakeTasksArgs),
    /// Validate IDX files.
    ParseCheck(ParseCheckArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Layer widths, e.g. 784,392,392,392,2.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Use only the first N training examples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug, Clone)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    mode: Option<PretrainMode>,
    #[arg(long, value_enum)]
    init: Option<InitName>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_perturb: Option<usize>,
    #[arg(long)]
    n_uniform: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Initialisation scheme for scratch networks.
    #[arg(long, value_enum)]
    init: Option<InitName>,
    /// Pre-trained checkpoint to fine-tune from.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Label for the pretrain column (default: `ours` with --pretrained, else `none`).
    #[arg(long)]
    pretrain_label: Option<String>,
    /// Also fine-tune scratch networks on the same task suites.
    #[arg(long)]
    compare_scratch: bool,
    /// Labelled examples per digit (comma-separated list allowed).
    #[arg(long = "N", value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Number of tasks per seed, or a task file.
    #[arg(long)]
    tasks: Option<String>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Probe {
    Ds,
    Dead,
    Density,
    Bounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DensityModeArg {
    PerInput,
    PerPerturbation,
}

#[derive(Args, Debug, Clone)]
struct DiagnoseArgs {
    /// Checkpoint to inspect.
    checkpoint: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    probe: Probe,
    #[arg(long, value_enum, default_value = "per-input")]
    mode: DensityModeArg,
    /// Fixed inputs or perturbations in the density dump.
    #[arg(long, default_value_t = 4)]
    anchors: usize,
    /// Radius for the tail bound.
    #[arg(long, default_value_t = 2.0)]
    r: f64,
    /// Monte-Carlo draws for the tail probability.
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_perturb: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct MakeTasksArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of tasks.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Task file to write (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ParseCheckArgs {
    /// IDX files (default: the four MNIST files under --data-dir).
    files: Vec<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is configured once");
    }
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::MakeTasks(a) => commands::make_tasks(a),
        Command::ParseCheck(a) => commands::parse_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

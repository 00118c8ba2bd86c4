//! Experiment harness: data generation, training, streaming inference,
//! method comparison and property-check suites.
//!
//! Exit codes: 0 success, 1 check or runtime failure, 2 invalid arguments,
//! 3 I/O failure, 4 training-time infeasibility, 5 aggregate-guarantee failure.

pub mod checks;
pub mod commands;
pub mod compare;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::HarnessConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Infeasible(String),
    Guarantee(String),
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Guarantee(_) => 5,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("invalid arguments", m),
            CliError::Io(m) => ("i/o error", m),
            CliError::Infeasible(m) => ("infeasible", m),
            CliError::Guarantee(m) => ("guarantee violated", m),
            CliError::Failed(m) => ("failed", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<fairlayer::Error> for CliError {
    fn from(e: fairlayer::Error) -> Self {
        use fairlayer::Error as E;
        match e {
            E::Io(_) | E::Parse(_) => CliError::Io(e.to_string()),
            E::Infeasible | E::InfeasibleBatchConstraints { .. } => CliError::Infeasible(e.to_string()),
            E::InvalidConfig(_)
            | E::InvalidRatios(_)
            | E::InvalidSpec(_)
            | E::InvalidBounds { .. }
            | E::UnknownAttribute(_)
            | E::DimensionMismatch(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "fairlayer", version, about = "Fairness-layer experiment harness")]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for relative output paths.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one synthetic scenario.
    Datagen(DatagenArgs),
    /// Train one method on a dataset.
    Train(TrainArgs),
    /// Run primal-dual inference over the test split.
    Stream(StreamArgs),
    /// Compare methods across scenarios.
    Compare(CompareArgs),
    /// Run a property-check suite.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Scenario index in the 32-scenario grid.
    #[arg(long, conflicts_with = "scenario_file")]
    pub scenario: Option<usize>,
    /// TOML scenario description instead of a grid index.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Stratify the train/validation/test split by group.
    #[arg(long)]
    pub stratified_split: bool,
    #[arg(long, default_value = "dataset.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// flayer, projection, penalty or strict-penalty.
    #[arg(long, value_parser = parse_method)]
    pub method: fairlayer::Method,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated λ values; selects the smallest one meeting the constraints.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub b_train: Option<usize>,
    /// Train penalty methods on raw outputs instead of the sigmoid box map.
    #[arg(long)]
    pub no_box_reparam: bool,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub b_tau: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Finite-horizon allowance on top of epsilon.
    #[arg(long)]
    pub slack: Option<f64>,
    #[arg(long, default_value = "stream_log.csv")]
    pub log: PathBuf,
    #[arg(long, default_value = "stream_checkpoint.json")]
    pub checkpoint: PathBuf,
    /// Continue from the checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many batches (the checkpoint allows resuming).
    #[arg(long)]
    pub max_batches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    pub methods: Option<Vec<fairlayer::Method>>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// All 32 scenarios in three batch regimes at full scale.
    #[arg(long)]
    pub full: bool,
    /// Output file stem.
    #[arg(long, default_value = "compare")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_parser = parse_suite)]
    pub suite: checks::Suite,
}

fn parse_method(s: &str) -> Result<fairlayer::Method, String> {
    fairlayer::Method::parse(s).ok_or_else(|| format!("unknown method {s:?}"))
}

fn parse_suite(s: &str) -> Result<checks::Suite, String> {
    checks::Suite::parse(s).ok_or_else(|| format!("unknown suite {s:?}"))
}

/// Effective settings shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: HarnessConfig,
    pub out_dir: Option<PathBuf>,
}

impl Context {
    pub fn output(&self, path: &Path) -> CliResult<PathBuf> {
        let p = match &self.out_dir {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn input(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if path.is_relative() && !path.exists() => dir.join(path),
            _ => path.to_path_buf(),
        }
    }
}

pub fn run_cli(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => HarnessConfig::load(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    let ctx = Context { config, out_dir: cli.out_dir };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.threads)
        .build()
        .map_err(|e| CliError::Failed(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Datagen(a) => commands::datagen(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::Stream(a) => commands::stream(&ctx, &a),
        Command::Compare(a) => compare::command(&ctx, &a),
        Command::Check(a) => checks::command(&ctx, &a),
    })
}

/// Parse `args`, run, print any error, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fairlayer: {e}");
            e.code()
        }
    }
}

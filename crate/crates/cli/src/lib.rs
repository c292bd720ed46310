//! The `cobl` command line: scene generation, training, sampling,
//! evaluation and compositing behind one entry point.

pub mod commands;
pub mod config;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{load_config, parse_config, RunConfig};

/// Exit code for bad invocations and configuration.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a command.
pub const EXIT_RUNTIME: i32 = 1;

/// Environment variable read when `--jobs` is absent.
pub const JOBS_ENV: &str = "COBL_SANDBOX_JOBS";

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime { category: &'static str, message: String },
}

impl From<cobl::Error> for Failure {
    fn from(e: cobl::Error) -> Self {
        use cobl::Error::*;
        let category = match &e {
            Structural(_) => "structural",
            Validation(_) => "validation",
            Numerical { .. } => "numerical",
            Generation { .. } => "generation",
            Training { .. } => "training",
            ContractViolation(_) => "contract",
            Capability(_) => "capability",
            Io { .. } => "io",
            Image { .. } => "image",
            Format(_) => "format",
        };
        Failure::Runtime {
            category,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Failure::Runtime {
            category: "io",
            message: format!("{}: {e}", path.display()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cobl", version, about = "Layered scene decomposition with coupled guided diffusion")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (falls back to COBL_SANDBOX_JOBS).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Replace an existing output instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layered-scene dataset.
    Gen(GenArgs),
    /// Train the per-layer base denoiser.
    TrainBase(TrainBaseArgs),
    /// Train coupling and image adapter on top of a frozen base.
    TrainAdapter(TrainAdapterArgs),
    /// Decompose images into layer stacks.
    Sample(SampleArgs),
    /// Score sampled stacks against ground truth.
    Eval(EvalArgs),
    /// Composite a stored stack and compare it with a target image.
    Composite(CompositeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub texture_variants: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt_out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainAdapterArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    /// Checkpoint written by `train-base`.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A single RGB image to decompose.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    /// Decompose every scene of a dataset split instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split used with --data: train, val or all.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Only the first N scenes of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub w: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub period: Option<usize>,
    /// Turn off the compositional and prior guidance terms.
    #[arg(long)]
    pub no_guidance: bool,
    /// Differentiate through the denoiser.
    #[arg(long)]
    pub exact_grad: bool,
    /// Ignore the image: null conditioning, no guidance, no interventions.
    #[arg(long)]
    pub unconditioned: bool,
    #[arg(long)]
    pub n_seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Sample run directories, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub pred: Vec<PathBuf>,
    /// Dataset directory or a single stack directory.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompositeArgs {
    #[arg(long)]
    pub stack: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Image to compare against; defaults to `composite.png` in the stack
    /// directory when present.
    #[arg(long)]
    pub target: Option<PathBuf>,
}

fn jobs(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if let Some(j) = flag {
        return Ok(Some(j));
    }
    match std::env::var(JOBS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{JOBS_ENV} must be a positive integer, got {v:?}"))),
        _ => Ok(None),
    }
}

fn report(failure: &Failure) -> i32 {
    match failure {
        Failure::Usage(m) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Failure::Runtime { category, message } => {
            let line = serde_json::json!({"error": {"category": category, "message": message}});
            eprintln!("{line}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let outcome = jobs(cli.jobs).and_then(|n| {
        if n == Some(0) {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = n {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Failure::Runtime {
            category: "io",
            message: format!("cannot start worker pool: {e}"),
        })?;
        let threads = pool.current_num_threads();
        pool.install(|| commands::run(&cli, &args, threads))
    });
    match outcome {
        Ok(()) => 0,
        Err(f) => report(&f),
    }
}

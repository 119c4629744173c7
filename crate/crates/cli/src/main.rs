//! `y12`: describe models, benchmark attention kernels, check gradients,
//! train and evaluate on the synthetic shapes set.

mod bench;
mod commands;
mod svg;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "y12", version, about = "Area-attention detector toolkit")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the machine-readable result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and FLOP tables for all four variants.
    Describe(DescribeArgs),
    /// Naive, area and tiled attention micro-benchmarks.
    BenchAttn(BenchArgs),
    /// Finite-difference check of every primitive and block.
    Gradcheck(GradcheckArgs),
    /// Train on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Write a synthetic shapes dataset.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    /// Model configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Token counts.
    #[arg(long = "n", value_delimiter = ',', default_value = "256,512,1024")]
    n: Vec<usize>,
    /// Head dimensions.
    #[arg(long = "d", value_delimiter = ',', default_value = "32")]
    d: Vec<usize>,
    /// Area counts.
    #[arg(long = "L", value_delimiter = ',', default_value = "4")]
    areas: Vec<usize>,
    /// Tile shapes as `BRxBC`.
    #[arg(long, value_delimiter = ',', default_value = "64x64")]
    tiles: Vec<String>,
    /// Timed repetitions per record (at least 30).
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also draw wall time against n per kernel.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Test hook: perturb the tiled kernel's output before verification.
    #[arg(long, hide = true)]
    corrupt_kernel: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Test hook: corrupt the backward pass of this primitive.
    #[arg(long, hide = true)]
    break_grad: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (`images/`, `labels/`).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    /// Newline-delimited JSON, one object per epoch; defaults to `--out` or stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single-image timings for the latency statistics (at least 100).
    #[arg(long, default_value_t = 100)]
    latency_samples: usize,
    /// Draw latency against mAP for this run and any `--frontier-from` reports.
    #[arg(long)]
    frontier_svg: Option<PathBuf>,
    /// Earlier eval JSON reports to include in the frontier plot.
    #[arg(long, value_delimiter = ',')]
    frontier_from: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: a verification gate failed.
    Verification(String),
    /// Exit 2: bad flags, configuration or incompatible checkpoint.
    Usage(String),
    /// Exit 3: unreadable, unwritable or malformed files.
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
            Failure::Usage(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<y12_core::Error> for Failure {
    fn from(e: y12_core::Error) -> Self {
        use y12_core::Error as E;
        match e {
            E::Io(_) | E::Format(_) => Failure::Io(e.to_string()),
            E::Config(_) | E::Compatibility(_) | E::Dimension(_) => Failure::Usage(e.to_string()),
            E::Contract(_) => Failure::Verification(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if k == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out = commands::Output::new(cli.out.clone());
    let result = match &cli.command {
        Command::Describe(a) => commands::describe(a, &out),
        Command::BenchAttn(a) => commands::bench_attn(a, cli.seed, &out),
        Command::Gradcheck(a) => commands::gradcheck(a, cli.seed, &out),
        Command::Train(a) => commands::train(a, cli.seed, &out),
        Command::Eval(a) => commands::eval(a, &out),
        Command::Synth(a) => commands::synth(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

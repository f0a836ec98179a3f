mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status categories.
pub enum Failure {
    /// Bad flags, config or inputs; nothing was written. Exit 1.
    Usage(String),
    /// Failure after validation. Exit 2.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "glassnorm",
    about = "Surface-normal regression for transparent objects: data, training, evaluation",
    disable_version_flag = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    /// Print crate and on-disk format versions.
    #[arg(short = 'V', long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Global {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-worker paths and no wall-clock fields, for byte-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for batch assembly. Only 1 is implemented.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// JSON config with flat dotted keys; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural transparent-object dataset.
    Gen(commands::gen::GenArgs),
    /// Train the predictor.
    Train(commands::train::TrainArgs),
    /// Predict a normal map for an image or a whole dataset.
    Infer(commands::infer::InferArgs),
    /// Score predictions against a dataset.
    Eval(commands::eval::EvalArgs),
    /// Average per-metric ranks of a method/score table.
    Rank(commands::rank::RankArgs),
    /// One-level Haar decomposition of an image.
    Wavelet(commands::wavelet::WaveletArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Local latency and throughput report.
    Bench(commands::bench::BenchArgs),
}

fn print_version() {
    println!("glassnorm {}", env!("CARGO_PKG_VERSION"));
    println!("checkpoint format {}", glassnorm::predictor::checkpoint::FORMAT_VERSION);
    println!("dataset format {}", glassnorm::scenegen::io::DATASET_FORMAT_VERSION);
}

fn run(cli: Cli) -> CmdResult {
    if let Some(w) = cli.global.workers {
        if w != 1 {
            return Err(usage(format!("--workers {w}: only single-worker execution is implemented")));
        }
    }
    let g = &cli.global;
    match cli.command {
        Some(Command::Gen(a)) => commands::gen::run(g, a),
        Some(Command::Train(a)) => commands::train::run(g, a),
        Some(Command::Infer(a)) => commands::infer::run(g, a),
        Some(Command::Eval(a)) => commands::eval::run(g, a),
        Some(Command::Rank(a)) => commands::rank::run(g, a),
        Some(Command::Wavelet(a)) => commands::wavelet::run(g, a),
        Some(Command::Gradcheck(a)) => commands::gradcheck::run(g, a),
        Some(Command::Bench(a)) => commands::bench::run(g, a),
        None => Err(usage("missing subcommand (see --help)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.version {
        print_version();
        return ExitCode::SUCCESS;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metasbir::config::{Method, Variant};

/// Few-shot adaptive sketch-based retrieval: data generation, training,
/// evaluation and gradient verification.
#[derive(Debug, Parser)]
#[command(name = "metasbir", version)]
struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,

    /// Output directory.
    #[arg(long, env = "METASBIR_OUT", default_value = "out")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding items.jsonl, split.json and (optionally)
    /// semantic.jsonl; defaults to the output directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset, semantic table and split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: pretrain the baseline embedding.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Stage 2: meta-train from the pretrained baseline.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Baseline checkpoint; defaults to <out>/baseline.ckpt.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Training recipe; defaults to meta.variant from the config.
        #[arg(long)]
        variant: Option<Variant>,
        /// Continue from a saved meta-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adapt and evaluate methods on the test units.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Directory with baseline.ckpt and meta-<variant>.ckpt; defaults to the output directory.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Comma-separated methods; defaults to eval.methods.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Comma-separated shot counts; defaults to eval.k.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Step, shot, width and regularizer ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Finite-difference verification of every gradient path.
    CheckGrads {
        /// Optional configuration (training settings for the hypergradient suite).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "METASBIR_OUT", default_value = "out")]
        out: PathBuf,
        /// Random draws per check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use egam::eval::Mode;
use egam::ProblemKind;
use egam_tensor::Real;

/// Graph attention with edge embeddings for routing problems.
#[derive(Debug, Parser)]
#[command(name = "egam", version)]
struct Cli {
    /// Threads for instance-parallel work (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded JSONL dataset.
    Gen {
        #[arg(long)]
        kind: ProblemKind,
        /// Nodes per instance, depot included.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy with REINFORCE and the symmetry baseline.
    Train {
        /// `key = value` file applied over the profile.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        profile: String,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Per-batch training log (CSV).
        #[arg(long)]
        log: PathBuf,
        /// Validation log (CSV); defaults to `validation.csv` next to the log.
        #[arg(long)]
        val_log: Option<PathBuf>,
        #[arg(long)]
        kind: Option<ProblemKind>,
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batches_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<Real>,
        #[arg(long)]
        seed: Option<u64>,
        /// Drop the edge stream (ablation).
        #[arg(long)]
        node_only: bool,
        /// Further overrides, `key=value`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint, a solution file or nearest neighbour on a dataset.
    #[command(group(ArgGroup::new("source").required(true).args(["ckpt", "solutions", "nearest_neighbor"])))]
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Routes to score (as written by `oracle`).
        #[arg(long)]
        solutions: Option<PathBuf>,
        #[arg(long)]
        nearest_neighbor: bool,
        #[arg(long)]
        data: PathBuf,
        /// greedy, sample:K or aug:MxN.
        #[arg(long, default_value = "greedy")]
        mode: Mode,
        /// `oracle` to solve references now, or a file written by `oracle`.
        #[arg(long = "ref")]
        reference: Option<String>,
        /// Metrics CSV; one row is appended.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Violation weight for TSPTW/TSPDL costs.
        #[arg(long)]
        beta: Option<Real>,
    },
    /// Solve one instance and print the route.
    #[command(group(ArgGroup::new("input").required(true).args(["instance_json", "instance_file"])))]
    Solve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instance_json: Option<String>,
        #[arg(long)]
        instance_file: Option<PathBuf>,
        #[arg(long, default_value = "greedy")]
        mode: Mode,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta: Option<Real>,
    },
    /// Compare tape gradients of a tour log-probability with central differences.
    Gradcheck {
        #[arg(long, default_value = "tsp")]
        kind: ProblemKind,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        dm: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        node_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: Real,
        /// Denominator floor of the relative error `|a-n| / max(floor, |a|+|n|)`.
        #[arg(long, default_value_t = 1e-8)]
        floor: Real,
        /// Exit with status 3 above this error.
        #[arg(long, default_value_t = 1e-4)]
        tol: Real,
    },
    /// Reference solutions: Held-Karp for TSP, exhaustive search otherwise.
    Oracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use nearest neighbour instead of an exact method.
        #[arg(long)]
        nearest_neighbor: bool,
        #[arg(long)]
        beta: Option<Real>,
    },
}

/// Why a command stopped; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad input data or configuration (status 1).
    Data(String),
    /// NaN, divergence or a failed gradient check (status 3).
    Numeric(String),
}

impl From<egam::Error> for Failure {
    fn from(e: egam::Error) -> Self {
        use egam_tensor::TensorError;
        match e {
            egam::Error::Tensor(TensorError::NonFinite { .. } | TensorError::Divergence { .. }) => {
                Failure::Numeric(e.to_string())
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}

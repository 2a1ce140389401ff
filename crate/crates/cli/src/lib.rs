//! Command-line front end for the equivariance-aware quantization toolkit.
//!
//! One binary, seven subcommands: `gen-data`, `train`, `quantize`, `eval`,
//! `lee`, `bench`, `diag-mddq`. Every run writes a manifest (flat `key=value`
//! text) beside its outputs recording the subcommand, the fully resolved
//! configuration, the seed, and the artifact paths, so any run can be
//! repeated from the manifest alone. Tables are printed twice: a human
//! layout, and `REC <table> key=value ...` lines whose values round-trip
//! through parsing exactly.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use equiquant::CoreError;

pub use config::{parse_train_setup, TrainSetup};

/// Everything a subcommand can fail with, split by exit code.
#[derive(Debug)]
pub enum RunError {
    /// Malformed invocation: bad flag values, bad environment overrides.
    Usage(String),
    /// The invocation was fine but the data or model was not.
    Data(CoreError),
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        RunError::Data(e)
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Data(CoreError::Io(e))
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Usage(m) => write!(f, "usage error: {m}"),
            RunError::Data(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "equiquant",
    version,
    about = "Equivariance-aware quantization for SO(3)-equivariant graph networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic Lennard-Jones dataset in extended-XYZ format
    GenData(GenDataArgs),
    /// Train a model under a quantization scheme from a key=value config file
    Train(TrainArgs),
    /// Convert a trained float checkpoint into an integer checkpoint
    Quantize(QuantizeArgs),
    /// Report energy MAE (meV), force MAE (meV/A), and LEE (meV/A) on a dataset
    Eval(EvalArgs),
    /// Per-molecule local equivariance error under random rotations
    Lee(LeeArgs),
    /// Latency comparison between a float and an integer checkpoint
    Bench(BenchArgs),
    /// Monte-Carlo angular error of direction quantizers per bit width
    DiagMddq(DiagMddqArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output XYZ path
    #[arg(long)]
    out: PathBuf,
    /// Number of molecules
    #[arg(long)]
    n: usize,
    /// Atom count range, inclusive: LO..HI (LO..=HI also accepted)
    #[arg(long)]
    atoms: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path (default: <out>.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; see README for the key list
    #[arg(long)]
    config: PathBuf,
    /// Quantization scheme, overriding the config file
    #[arg(long, value_parser = ["fp32", "int8-scalar", "int8-full", "w4a8"])]
    scheme: Option<String>,
    /// Output checkpoint path; the epoch log goes to <out>.log
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: <out>.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Trained float checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Output integer checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: <out>.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (float or integer)
    #[arg(long)]
    ckpt: PathBuf,
    /// Labeled XYZ dataset
    #[arg(long)]
    data: PathBuf,
    /// Rotations per molecule for the LEE column (0 skips it)
    #[arg(long, default_value_t = 2)]
    rotations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path (default: <ckpt>.eval.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct LeeArgs {
    /// Checkpoint to probe (float or integer)
    #[arg(long)]
    ckpt: PathBuf,
    /// XYZ dataset (labels not required)
    #[arg(long)]
    data: PathBuf,
    /// Rotations per molecule
    #[arg(long, default_value_t = 8)]
    rotations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path (default: <ckpt>.lee.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Full-precision baseline checkpoint
    #[arg(long = "ckpt-fp32")]
    ckpt_fp32: PathBuf,
    /// Integer checkpoint to compare
    #[arg(long = "ckpt-int")]
    ckpt_int: PathBuf,
    /// Timed passes per variant (after 10 unmeasured warm-ups)
    #[arg(long, default_value_t = 1000)]
    runs: usize,
    /// Optional XYZ file; the first molecule is the workload. Default: a
    /// generated 12-atom cluster.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest path (default: <ckpt-int>.bench.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct DiagMddqArgs {
    /// Comma-separated bit widths, e.g. 2,4,8
    #[arg(long, default_value = "2,4,8")]
    bits: String,
    /// Random unit vectors per bit width
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path (default: ./diag-mddq.manifest)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Parses argv and runs the matching subcommand, printing to stdout.
pub fn run(args: &[String]) -> i32 {
    let mut out = std::io::stdout();
    run_with_output(args, &mut out)
}

/// Like [`run`] but printing to an arbitrary writer, for in-process tests.
pub fn run_with_output(args: &[String], out: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.cmd, out) {
        Ok(()) => 0,
        Err(e @ RunError::Usage(_)) => {
            eprintln!("{e}");
            1
        }
        Err(e @ RunError::Data(_)) => {
            eprintln!("{e}");
            2
        }
    }
}

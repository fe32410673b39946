//! `mergeforge`: merge checkpoints, analyse subspaces, run benchmarks and
//! bound checks.

mod commands;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{analyze, bench, inspect, merge, verify};
use error::{usage, CliResult};

#[derive(Parser, Debug)]
#[command(name = "mergeforge", version, about = "Sequential model merging toolkit")]
struct Cli {
    /// Worker threads; falls back to MERGEFORGE_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Merge task checkpoints into the base, in order.
    Merge(merge::MergeArgs),
    /// Data/task-vector subspace affinity maps.
    Analyze(analyze::AnalyzeArgs),
    /// Multi-order benchmark on a synthetic suite.
    Bench(bench::BenchArgs),
    /// Randomised checks of the perturbation bounds.
    Verify(verify::VerifyArgs),
    /// List the tensors of a checkpoint.
    Inspect(inspect::InspectArgs),
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MERGEFORGE_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("MERGEFORGE_THREADS={v:?} is not a thread count"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Merge(a) => merge::run(a),
        Command::Analyze(a) => analyze::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Inspect(a) => inspect::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

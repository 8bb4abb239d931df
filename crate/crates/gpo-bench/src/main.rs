//! `gpo-bench` command line: train runs, run the verification suite, sweep
//! schedule comparisons, or dump a schedule curve.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 runtime error.

use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;

use gpo_bench::cli::{self, CliError};

#[derive(Parser, Debug)]
#[command(
    name = "gpo-bench",
    about = "PPO with a growing action space on toy torque tasks, plus a numerical verification suite",
    after_help = "Any config key can be overridden with --<section>.<key>=<value>, e.g. \
                  --schedule.kind=gompertz or --trainer.updates=500."
)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Subcommand, Debug)]
enum Cmd {
    /// Train one policy under the configured growth schedule.
    Train(Common),
    /// Run the numerical verification suite and write JSON reports.
    Verify(Common),
    /// Train the schedule x seed cross product and aggregate the results.
    Sweep(Common),
    /// Emit `t,f,beta` for the configured schedule over the run length.
    DumpSchedule(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Config file (TOML); omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; wins over the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; wins over the config file.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Pull `--section.key=value` overrides out of argv before clap sees it;
/// clap cannot declare dynamically named flags.
fn split_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in argv {
        let dotted = arg
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .filter(|(k, _)| k.contains('.'))
            .map(|(k, v)| (k.to_string(), v.to_string()));
        match dotted {
            Some(kv) => overrides.push(kv),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn thread_pool_from_env() {
    if let Ok(v) = std::env::var("GPO_BENCH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run() -> Result<u8, CliError> {
    thread_pool_from_env();
    let (rest, overrides) = split_overrides(std::env::args().collect());
    let args = Args::parse_from(rest);
    let common = match &args.cmd {
        Cmd::Train(c) | Cmd::Verify(c) | Cmd::Sweep(c) | Cmd::DumpSchedule(c) => c,
    };
    let cfg = cli::parse_config(
        common.config.as_deref(),
        &overrides,
        common.seed,
        common.output.clone(),
    )?;
    match args.cmd {
        Cmd::Train(_) => {
            let rows = cli::run_train(&cfg)?;
            let last = rows.last().map(|r| r.mean_return).unwrap_or(f64::NAN);
            eprintln!(
                "train: {} updates, final mean return {last:.4}, artifacts in {}",
                rows.len(),
                cfg.output_dir.display()
            );
            Ok(0)
        }
        Cmd::Verify(_) => {
            let (all_passed, _) = cli::run_verify(&cfg)?;
            Ok(if all_passed { 0 } else { 1 })
        }
        Cmd::Sweep(_) => {
            let outcome = cli::run_sweep(&cfg)?;
            for s in &outcome.summaries {
                let (fm, fs) = s.final_mean_std();
                eprintln!(
                    "sweep: {:<10} final return {fm:.4} +/- {fs:.4} over {} seeds",
                    cli::kind_name(s.kind),
                    s.seeds
                );
            }
            for (k, seed, e) in &outcome.failures {
                eprintln!("sweep: FAILED {} seed {}: {}", cli::kind_name(*k), seed, e);
            }
            // failed cells are runtime errors; the sweep itself continued
            Ok(if outcome.failures.is_empty() { 0 } else { 3 })
        }
        Cmd::DumpSchedule(_) => {
            cli::dump_schedule(&cfg)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

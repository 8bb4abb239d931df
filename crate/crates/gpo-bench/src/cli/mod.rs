//! Configuration, run orchestration, metrics persistence, and
//! reproducibility plumbing.
//!
//! Subcommands: `train`, `verify`, `sweep`, `dump-schedule`. Artifacts per
//! run: a canonical `config.toml` with every resolved value, the command's
//! outputs (`metrics.csv`, `reports/*.json`, `aggregate.csv`/`summary.csv`,
//! `schedule.csv`), and a `manifest.json` with content hashes of all of
//! them. Identical `(config, seed)` reruns produce hash-identical metric
//! and report files.

pub mod config;
pub mod manifest;
pub mod runner;

pub use config::{default_schedule, parse_config, ConfigError, FileConfig, RunConfig};
pub use runner::{
    dump_schedule, kind_name, run_sweep, run_train, run_verify, CliError, KindSummary,
    SweepOutcome,
};

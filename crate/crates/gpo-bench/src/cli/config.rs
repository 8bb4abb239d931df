//! Run configuration: TOML file with sections mirroring the module names,
//! dotted-key CLI overrides, derived desk-scale schedule defaults, and a
//! canonical serialization that records every resolved value.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::envs::{EnvKind, EnvSpec};
use crate::growth::{GrowthKind, GrowthSchedule};
use crate::theory::TheoryConfig;
use crate::trainer::{LogProbPath, OptimizerKind, SigmaMode, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config value for {field}: {why}")]
    Invalid { field: String, why: String },
    #[error("bad override {key}: {why}")]
    Override { key: String, why: String },
}

fn invalid(field: &str, why: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), why: why.to_string() }
}

/// `[task]` section. Optional fields derive their defaults from the task
/// kind and the trainer/schedule sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: EnvKind,
    /// Episode length; defaults to the trainer rollout horizon.
    pub horizon: Option<usize>,
    /// Actuator limit; defaults per task (32 point mass, 8 pendulum).
    pub a_limit: Option<f64>,
    /// Scale command targets by `f(t)`; defaults to `schedule.kind != no_growth`.
    pub cmd_scaling: Option<bool>,
    pub dt: f64,
    /// Write a `trajectory.csv` state trace of one final-policy episode.
    pub dump_trajectories: bool,
    /// Command ranges; defaults per task kind.
    pub v_cmd_range: Option<f64>,
    pub h_cmd_range: Option<f64>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: EnvKind::PointMassTrack,
            horizon: None,
            a_limit: None,
            cmd_scaling: None,
            dt: 0.005,
            dump_trajectories: false,
            v_cmd_range: None,
            h_cmd_range: None,
        }
    }
}

/// `[trainer]` section: every PPO hyperparameter except the seed (which is
/// top-level so one knob controls all substreams).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lam: f64,
    pub lr: f64,
    pub updates: usize,
    pub horizon: usize,
    pub n_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub normalize_adv: bool,
    pub sigma_mode: SigmaMode,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
    pub logprob_path: LogProbPath,
    pub hidden: Vec<usize>,
    /// Write intermediate checkpoints every N updates (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainerSection {
            clip_eps: t.clip_eps,
            gamma: t.gamma,
            lam: t.lam,
            lr: t.lr,
            updates: t.updates,
            horizon: t.horizon,
            n_envs: t.n_envs,
            epochs: t.epochs,
            minibatches: t.minibatches,
            normalize_adv: t.normalize_adv,
            sigma_mode: t.sigma_mode,
            entropy_coef: t.entropy_coef,
            value_coef: t.value_coef,
            max_grad_norm: t.max_grad_norm,
            optimizer: t.optimizer,
            logprob_path: t.logprob_path,
            hidden: t.hidden,
            checkpoint_every: 0,
        }
    }
}

/// `[schedule]` section. Missing `k`/`t0` get desk-scale defaults derived
/// from the run length (see [`default_schedule`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: GrowthKind,
    pub k: Option<f64>,
    pub t0: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: GrowthKind::Gompertz, k: None, t0: None }
    }
}

/// `[sweep]` section: the schedule-comparison axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub schedules: Vec<GrowthKind>,
    pub seeds: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            schedules: vec![
                GrowthKind::NoGrowth,
                GrowthKind::Linear,
                GrowthKind::Sigmoid,
                GrowthKind::Gompertz,
            ],
            seeds: 10,
        }
    }
}

/// The on-disk config shape. An empty file resolves to all defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub task: TaskSection,
    pub trainer: TrainerSection,
    pub schedule: ScheduleSection,
    pub theory: TheoryConfig,
    pub sweep: SweepSection,
}

/// Fully resolved configuration: every value concrete, validated, and
/// recorded by the manifest.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env_spec: EnvSpec,
    pub trainer: TrainerConfig,
    pub schedule: GrowthSchedule,
    pub theory: TheoryConfig,
    pub sweep: SweepSection,
    /// Raw `cmd_scaling` choice (None = auto per schedule kind), kept so
    /// sweep cells can re-derive it per kind.
    pub cmd_scaling_override: Option<bool>,
    /// Intermediate-checkpoint period (0 = final only).
    pub checkpoint_every: usize,
    /// Emit a state trace of one episode under the trained policy.
    pub dump_trajectories: bool,
    canonical: FileConfig,
}

/// Desk-scale schedule parameters for a run of `updates` iterations. The
/// reference shapes (Table-style parameters at robot scale) are preserved by
/// keeping `k * t0` fixed while the midpoint lands at a fixed fraction of
/// the run: linear ramps over exactly the run; the sigmoid midpoint sits at
/// 7.5% and the Gompertz midpoint at 60% of the run.
pub fn default_schedule(kind: GrowthKind, updates: usize, a_limit: f64) -> GrowthSchedule {
    let u = updates.max(1) as f64;
    let (k, t0) = match kind {
        GrowthKind::NoGrowth => (0.0, 0.0),
        GrowthKind::Linear => (1.0 / u, u),
        GrowthKind::Sigmoid => {
            let t0 = 0.075 * u;
            (6.9 / t0, t0)
        }
        GrowthKind::Gompertz => {
            let t0 = 0.6 * u;
            (0.72 / t0, t0)
        }
    };
    GrowthSchedule { kind, k, t0, a_limit }
}

/// Default actuator limit per task kind.
fn default_a_limit(kind: EnvKind) -> f64 {
    match kind {
        EnvKind::PointMassTrack => 32.0,
        EnvKind::PendulumSwingup => 8.0,
    }
}

impl RunConfig {
    /// Resolve a file config (defaults filled, cross-section derivations
    /// applied) and validate every invariant.
    pub fn resolve(
        file: FileConfig,
        cli_seed: Option<u64>,
        cli_output: Option<PathBuf>,
    ) -> Result<RunConfig, ConfigError> {
        let mut canonical = file.clone();
        let seed = cli_seed.unwrap_or(file.seed);
        canonical.seed = seed;

        let output_dir = cli_output
            .or_else(|| file.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        canonical.output_dir = Some(output_dir.to_string_lossy().into_owned());

        let t = &file.trainer;
        let trainer = TrainerConfig {
            clip_eps: t.clip_eps,
            gamma: t.gamma,
            lam: t.lam,
            lr: t.lr,
            updates: t.updates,
            horizon: t.horizon,
            n_envs: t.n_envs,
            epochs: t.epochs,
            minibatches: t.minibatches,
            seed,
            normalize_adv: t.normalize_adv,
            sigma_mode: t.sigma_mode,
            entropy_coef: t.entropy_coef,
            value_coef: t.value_coef,
            max_grad_norm: t.max_grad_norm,
            optimizer: t.optimizer,
            logprob_path: t.logprob_path,
            hidden: t.hidden.clone(),
        };
        trainer.validate().map_err(|why| invalid("trainer", why))?;

        let a_limit = file.task.a_limit.unwrap_or_else(|| default_a_limit(file.task.kind));
        let defaults = default_schedule(file.schedule.kind, trainer.updates, a_limit);
        let schedule = GrowthSchedule {
            kind: file.schedule.kind,
            k: file.schedule.k.unwrap_or(defaults.k),
            t0: file.schedule.t0.unwrap_or(defaults.t0),
            a_limit,
        };
        schedule.validate().map_err(|e| invalid("schedule", e))?;
        canonical.schedule.k = Some(schedule.k);
        canonical.schedule.t0 = Some(schedule.t0);

        let cmd_scaling =
            file.task.cmd_scaling.unwrap_or(file.schedule.kind != GrowthKind::NoGrowth);
        let horizon = file.task.horizon.unwrap_or(trainer.horizon);
        let defaults_spec = match file.task.kind {
            EnvKind::PointMassTrack => EnvSpec::point_mass(horizon, cmd_scaling),
            EnvKind::PendulumSwingup => EnvSpec::pendulum(horizon, cmd_scaling),
        };
        let env_spec = EnvSpec {
            a_limit,
            dt: file.task.dt,
            v_cmd_range: file.task.v_cmd_range.unwrap_or(defaults_spec.v_cmd_range),
            h_cmd_range: file.task.h_cmd_range.unwrap_or(defaults_spec.h_cmd_range),
            ..defaults_spec
        };
        env_spec.validate().map_err(|why| invalid("task", why))?;
        canonical.task.horizon = Some(horizon);
        canonical.task.a_limit = Some(a_limit);
        canonical.task.cmd_scaling = Some(cmd_scaling);
        canonical.task.v_cmd_range = Some(env_spec.v_cmd_range);
        canonical.task.h_cmd_range = Some(env_spec.h_cmd_range);

        file.theory.validate().map_err(|why| invalid("theory", why))?;
        if file.sweep.schedules.is_empty() || file.sweep.seeds == 0 {
            return Err(invalid("sweep", "needs at least one schedule kind and one seed"));
        }

        Ok(RunConfig {
            seed,
            output_dir,
            env_spec,
            trainer,
            schedule,
            theory: file.theory.clone(),
            sweep: file.sweep.clone(),
            cmd_scaling_override: file.task.cmd_scaling,
            checkpoint_every: file.trainer.checkpoint_every,
            dump_trajectories: file.task.dump_trajectories,
            canonical,
        })
    }

    /// Canonical serialization: the fully resolved config as TOML. Parsing
    /// it back resolves to the same configuration, bit for bit.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(&self.canonical).expect("canonical config serializes")
    }

    /// Derived per-cell configuration for a sweep: schedule defaults
    /// re-derived for `kind`, `cmd_scaling` re-derived unless explicitly
    /// pinned, and the cell seed offsetting the master seed.
    pub fn sweep_cell(&self, kind: GrowthKind, seed_idx: u64) -> (TrainerConfig, EnvSpec, GrowthSchedule) {
        let schedule = default_schedule(kind, self.trainer.updates, self.env_spec.a_limit);
        let mut env_spec = self.env_spec;
        env_spec.cmd_scaling =
            self.cmd_scaling_override.unwrap_or(kind != GrowthKind::NoGrowth);
        let mut trainer = self.trainer.clone();
        trainer.seed = self.seed + seed_idx;
        (trainer, env_spec, schedule)
    }
}

/// Apply one `--section.key=value` override onto the parsed TOML table.
/// The value text is parsed as a TOML literal where possible and falls back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override { key: key.into(), why: "empty path component".into() });
    }
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override {
                key: key.into(),
                why: format!("{part} is not a table"),
            })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Load, override, deserialize, and resolve. `path = None` means an empty
/// config (all defaults). Overrides win over file values; `--seed` and
/// `--output` win over both.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
    cli_seed: Option<u64>,
    cli_output: Option<PathBuf>,
) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|source| ConfigError::Io { path: p.to_path_buf(), source })?,
        None => String::new(),
    };
    let mut table: toml::Table =
        text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut table, k, v)?;
    }
    let file: FileConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    RunConfig::resolve(file, cli_seed, cli_output)
}

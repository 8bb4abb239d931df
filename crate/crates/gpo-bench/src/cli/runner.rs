//! Run orchestration: `train`, `verify`, `sweep`, and `dump-schedule`,
//! each emitting deterministic artifacts plus a manifest.

use rayon::prelude::*;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::SystemTime;
use thiserror::Error;

use super::config::{ConfigError, RunConfig};
use super::manifest::emit_manifest;
use crate::envs::{env_reset, env_step, observe, EnvSpec};
use crate::growth::{squash, GrowthKind, GrowthSchedule};
use crate::policy::{forward_mean, save_checkpoint, PolicyError};
use crate::rng::{substream, StreamDomain};
use crate::theory::{self, BoundReport, TheoryError};
use crate::trainer::{MetricsRow, TrainError, Trainer, TrainerConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] crate::envs::EnvError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 = config error, 3 = runtime error (check failures are exit 1,
    /// decided by the caller from the pass/fail outcome).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Theory(TheoryError::Precondition(_)) => 2,
            _ => 3,
        }
    }
}

pub fn kind_name(kind: GrowthKind) -> &'static str {
    match kind {
        GrowthKind::NoGrowth => "no_growth",
        GrowthKind::Linear => "linear",
        GrowthKind::Sigmoid => "sigmoid",
        GrowthKind::Gompertz => "gompertz",
    }
}

/// Train one configuration into `dir`: streaming `metrics.csv`, optional
/// periodic checkpoints, and `checkpoint_final.json`. Rows written so far
/// survive an abort.
pub fn train_cell(
    trainer_cfg: TrainerConfig,
    env_spec: EnvSpec,
    schedule: GrowthSchedule,
    dir: &Path,
    checkpoint_every: usize,
) -> Result<(Vec<MetricsRow>, Trainer), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut trainer = Trainer::new(trainer_cfg, env_spec, schedule);
    let mut writer = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(writer, "{}", MetricsRow::HEADER)?;
    let mut rows = Vec::with_capacity(trainer.cfg.updates);
    let total = trainer.cfg.updates;
    let seed = trainer.cfg.seed;
    for u in 0..total {
        match trainer.train_step(u) {
            Ok(row) => {
                writeln!(writer, "{}", row.to_csv())?;
                rows.push(row);
            }
            Err(e) => {
                writer.flush()?;
                return Err(e.into());
            }
        }
        if checkpoint_every > 0 && (u + 1) % checkpoint_every == 0 && u + 1 < total {
            save_checkpoint(
                &trainer.policy,
                seed,
                (u + 1) as u64,
                &dir.join(format!("checkpoint_{:06}.json", u + 1)),
            )?;
        }
    }
    writer.flush()?;
    save_checkpoint(&trainer.policy, seed, total as u64, &dir.join("checkpoint_final.json"))?;
    Ok((rows, trainer))
}

/// State trace of one episode under the trained policy's mean actions:
/// `t,q...,qdot...,cmd...,torque...,reward,zeta...`.
fn dump_trajectory(trainer: &Trainer, path: &Path) -> Result<(), CliError> {
    let spec = trainer.env_spec;
    let f = trainer.schedule.value(trainer.cfg.updates as f64);
    let beta = trainer.schedule.beta(trainer.cfg.updates as f64);
    let mut rng = substream(trainer.cfg.seed, StreamDomain::Env, 1 << 24);
    let mut state = env_reset(&spec, &mut rng);
    let mut w = BufWriter::new(File::create(path)?);
    let dims = |tag: &str| -> String {
        (0..spec.d_q()).map(|i| format!("{tag}{i}")).collect::<Vec<_>>().join(",")
    };
    let cmds: String =
        (0..spec.d_cmd()).map(|i| format!("cmd{i}")).collect::<Vec<_>>().join(",");
    writeln!(w, "t,{},{},{cmds},{},reward,{}", dims("q"), dims("qdot"), dims("torque"), dims("zeta"))?;
    for t in 0..spec.horizon {
        let obs = observe(&spec, &state, f);
        let mu = forward_mean(&trainer.policy, &obs)?;
        let torque: Vec<f64> = mu.iter().map(|&a| squash(a, beta)).collect();
        let (next, reward, done) = env_step(&spec, &state, &torque, f)?;
        let join = |xs: &[f64]| xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(
            w,
            "{t},{},{},{},{},{reward},{}",
            join(&next.q),
            join(&next.qdot),
            join(&next.cmd),
            join(&torque),
            join(&next.zeta)
        )?;
        state = next;
        if done {
            break;
        }
    }
    w.flush()?;
    Ok(())
}

/// `train`: one run into the configured output directory.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<MetricsRow>, CliError> {
    let started = SystemTime::now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let (rows, trainer) = train_cell(
        cfg.trainer.clone(),
        cfg.env_spec,
        cfg.schedule,
        &dir,
        cfg.checkpoint_every,
    )?;
    if cfg.dump_trajectories {
        dump_trajectory(&trainer, &dir.join("trajectory.csv"))?;
    }
    std::fs::write(dir.join("config.toml"), cfg.canonical_toml())?;
    emit_manifest(&dir, &cfg.canonical_toml(), cfg.seed, started)?;
    Ok(rows)
}

/// `verify`: run the theory suite, write one JSON report per check plus a
/// summary table, and return whether everything passed.
pub fn run_verify(cfg: &RunConfig) -> Result<(bool, Vec<BoundReport>), CliError> {
    let started = SystemTime::now();
    let dir = cfg.output_dir.clone();
    let reports_dir = dir.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    let reports = theory::run_suite(&cfg.theory, cfg.seed)?;
    let mut summary = String::from("check,passed,violations,samples,max_lhs,bound,margin\n");
    println!("{:<24} {:>6} {:>10} {:>12}", "check", "pass", "violations", "margin");
    for rep in &reports {
        let body = serde_json::to_string_pretty(rep).expect("report serializes");
        std::fs::write(reports_dir.join(format!("{}.json", rep.name)), body)?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rep.name, rep.passed, rep.violations, rep.samples, rep.max_lhs, rep.bound, rep.margin
        ));
        println!(
            "{:<24} {:>6} {:>10} {:>12.6}",
            rep.name,
            if rep.passed { "ok" } else { "FAIL" },
            rep.violations,
            rep.margin
        );
    }
    std::fs::write(dir.join("reports").join("summary.csv"), summary)?;
    std::fs::write(dir.join("config.toml"), cfg.canonical_toml())?;
    emit_manifest(&dir, &cfg.canonical_toml(), cfg.seed, started)?;
    Ok((reports.iter().all(|r| r.passed), reports))
}

/// One sweep cell's outcome, kept in memory for aggregation.
pub struct CellResult {
    pub kind: GrowthKind,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

/// Per-schedule aggregate over seeds.
pub struct KindSummary {
    pub kind: GrowthKind,
    pub seeds: usize,
    /// Per-seed return averaged over the last 5% of updates.
    pub final_returns: Vec<f64>,
    /// Per-seed return averaged over a +/-2% window around 20% of training.
    pub checkpoint_returns: Vec<f64>,
}

impl KindSummary {
    pub fn final_mean_std(&self) -> (f64, f64) {
        mean_std(&self.final_returns)
    }

    pub fn checkpoint_mean_std(&self) -> (f64, f64) {
        mean_std(&self.checkpoint_returns)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Window-averaged `mean_return` around a fractional position of the run.
pub fn window_return(rows: &[MetricsRow], center_frac: f64, half_width_frac: f64) -> f64 {
    let n = rows.len();
    let center = ((n as f64 * center_frac).round() as usize).min(n - 1);
    let half = ((n as f64 * half_width_frac).round() as usize).max(1);
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(n - 1);
    let window = &rows[lo..=hi];
    let vals: Vec<f64> =
        window.iter().map(|r| r.mean_return).filter(|v| v.is_finite()).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<KindSummary>,
    pub failures: Vec<(GrowthKind, u64, String)>,
}

/// `sweep`: the cross product of schedule kinds and seeds, cells running in
/// parallel, each in its own subdirectory; aggregate and summary files are
/// written once by the orchestrator after all cells finish.
pub fn run_sweep(cfg: &RunConfig) -> Result<SweepOutcome, CliError> {
    let started = SystemTime::now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;

    let cells_plan: Vec<(GrowthKind, u64)> = cfg
        .sweep
        .schedules
        .iter()
        .flat_map(|&k| (0..cfg.sweep.seeds).map(move |i| (k, i)))
        .collect();

    let results: Vec<Result<CellResult, (GrowthKind, u64, String)>> = cells_plan
        .par_iter()
        .map(|&(kind, idx)| {
            let (trainer_cfg, env_spec, schedule) = cfg.sweep_cell(kind, idx);
            let seed = trainer_cfg.seed;
            let cell_dir = dir.join(kind_name(kind)).join(format!("seed_{seed}"));
            train_cell(trainer_cfg, env_spec, schedule, &cell_dir, 0)
                .map(|(rows, _)| CellResult { kind, seed, rows })
                .map_err(|e| (kind, seed, e.to_string()))
        })
        .collect();

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }

    // aggregate long-format CSV
    let mut agg = BufWriter::new(File::create(dir.join("aggregate.csv"))?);
    writeln!(agg, "schedule,seed,update,mean_return,beta")?;
    for cell in &cells {
        for row in &cell.rows {
            writeln!(
                agg,
                "{},{},{},{},{}",
                kind_name(cell.kind),
                cell.seed,
                row.update,
                row.mean_return,
                row.beta
            )?;
        }
    }
    agg.flush()?;

    // per-schedule summary over seeds
    let mut summaries = Vec::new();
    for &kind in &cfg.sweep.schedules {
        let of_kind: Vec<&CellResult> = cells.iter().filter(|c| c.kind == kind).collect();
        if of_kind.is_empty() {
            continue;
        }
        let final_returns: Vec<f64> =
            of_kind.iter().map(|c| window_return(&c.rows, 1.0, 0.05)).collect();
        let checkpoint_returns: Vec<f64> =
            of_kind.iter().map(|c| window_return(&c.rows, 0.2, 0.02)).collect();
        summaries.push(KindSummary { kind, seeds: of_kind.len(), final_returns, checkpoint_returns });
    }
    let mut runs = String::from("schedule,seed,final_return,at20_return\n");
    for cell in &cells {
        runs.push_str(&format!(
            "{},{},{},{}\n",
            kind_name(cell.kind),
            cell.seed,
            window_return(&cell.rows, 1.0, 0.05),
            window_return(&cell.rows, 0.2, 0.02)
        ));
    }
    std::fs::write(dir.join("runs.csv"), runs)?;

    let mut sum = String::from("schedule,seeds,final_mean,final_std,at20_mean,at20_std\n");
    for s in &summaries {
        let (fm, fs) = s.final_mean_std();
        let (cm, cs) = s.checkpoint_mean_std();
        sum.push_str(&format!("{},{},{fm},{fs},{cm},{cs}\n", kind_name(s.kind), s.seeds));
    }
    std::fs::write(dir.join("summary.csv"), sum)?;

    if !failures.is_empty() {
        let mut body = String::from("schedule,seed,error\n");
        for (k, s, e) in &failures {
            body.push_str(&format!("{},{},{}\n", kind_name(*k), s, e.replace(',', ";")));
        }
        std::fs::write(dir.join("failures.csv"), body)?;
    }

    std::fs::write(dir.join("config.toml"), cfg.canonical_toml())?;
    emit_manifest(&dir, &cfg.canonical_toml(), cfg.seed, started)?;
    Ok(SweepOutcome { cells, summaries, failures })
}

/// `dump-schedule`: evaluate the configured schedule over the run length.
pub fn dump_schedule(cfg: &RunConfig) -> Result<(), CliError> {
    let started = SystemTime::now();
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let mut w = BufWriter::new(File::create(dir.join("schedule.csv"))?);
    writeln!(w, "t,f,beta")?;
    for t in 0..=cfg.trainer.updates {
        let f = cfg.schedule.value(t as f64);
        writeln!(w, "{t},{f},{}", cfg.schedule.beta(t as f64))?;
    }
    w.flush()?;
    std::fs::write(dir.join("config.toml"), cfg.canonical_toml())?;
    emit_manifest(&dir, &cfg.canonical_toml(), cfg.seed, started)?;
    Ok(())
}

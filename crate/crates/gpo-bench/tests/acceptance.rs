//! Acceptance gate: every release-blocking claim, one test per criterion,
//! each printing a `criterion NN PASS/FAIL` line with its runtime.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! the schedule-comparison sweep (criteria 09/10) is the long pole and runs
//! once, shared between the tests that consume it.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use gpo_bench::cli::{self, RunConfig, SweepOutcome};
use gpo_bench::envs::{fatigue_update, FATIGUE_GAMMA};
use gpo_bench::growth::squash;
use gpo_bench::policy::{
    backprop_loss, forward_mean, graph::Tensor, sample_latent, score_gradient, PolicyParams,
};
use gpo_bench::rng::{substream, StreamDomain};
use gpo_bench::theory::{checks, convergence, TheoryConfig};
use rand::Rng;

/// Serializes the timed criteria so wall-clock budgets are meaningful on a
/// two-core machine.
static GATE: Mutex<()> = Mutex::new(());

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let _lock = GATE.lock().unwrap();
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn report(criterion: &str, ok: bool, elapsed: Duration, detail: &str) {
    println!(
        "criterion {criterion} {}: {detail} [{:.2}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

fn theory_cfg() -> TheoryConfig {
    TheoryConfig::default()
}

#[test]
fn criterion_01_update_equivalence() {
    let (rep, elapsed) = timed(|| checks::ratio_invariance_check(&theory_cfg(), 0).unwrap());
    let ok = rep.passed && rep.samples >= 10_000 && rep.max_lhs <= 1e-12;
    report(
        "01 update equivalence",
        ok && elapsed.as_secs_f64() < 10.0,
        elapsed,
        &format!("max |r_gpo - r_ppo| = {:.3e} over {} samples", rep.max_lhs, rep.samples),
    );
}

#[test]
fn criterion_02_gradient_difference_bound() {
    let (rep, elapsed) = timed(|| checks::gradient_difference_sweep(&theory_cfg(), 0).unwrap());
    let ok = rep.passed && rep.samples >= 10_000;
    report(
        "02 gradient difference bound",
        ok && elapsed.as_secs_f64() < 10.0,
        elapsed,
        &format!(
            "zero violations over {} points, max lhs {:.4} <= bound {:.4}",
            rep.samples, rep.max_lhs, rep.bound
        ),
    );
}

#[test]
fn criterion_03_variance_scaling() {
    let (rep, elapsed) = timed(|| checks::empirical_variance_sweep(&theory_cfg(), 0).unwrap());
    let slope = rep.details["slope"].as_f64().unwrap();
    let ok = rep.passed && (1.8..=2.2).contains(&slope);
    report(
        "03 variance scaling",
        ok && elapsed.as_secs_f64() < 60.0,
        elapsed,
        &format!("log-log slope {:.3} in [1.8, 2.2], zero bound violations", slope),
    );
}

#[test]
fn criterion_04_snr_scaling() {
    let (rep, elapsed) = timed(|| checks::snr_sweep(&theory_cfg(), 0).unwrap());
    let slope = rep.details["slope"].as_f64().unwrap();
    let ok = rep.passed && (-1.25..=-0.75).contains(&slope);
    report(
        "04 snr scaling",
        ok && elapsed.as_secs_f64() < 60.0,
        elapsed,
        &format!("log-log slope {:.3} in [-1.25, -0.75]", slope),
    );
}

#[test]
fn criterion_05_convergence_bound() {
    let (rep, elapsed) = timed(|| convergence::sgd_convergence_check(&theory_cfg(), 0).unwrap());
    let ratio = rep.details["plateau_ratio"].as_f64().unwrap();
    let ok = rep.passed && (3.5..=4.5).contains(&ratio);
    report(
        "05 convergence bound",
        ok && elapsed.as_secs_f64() < 60.0,
        elapsed,
        &format!("mean below bound pointwise; plateau ratio {:.2} in [3.5, 4.5]", ratio),
    );
}

#[test]
fn criterion_06_early_stage_advantage() {
    let (rep, elapsed) = timed(|| convergence::early_return_compare(&theory_cfg(), 0).unwrap());
    let diff = rep.details["paired_diff"].as_f64().unwrap();
    let se = rep.details["paired_diff_stderr"].as_f64().unwrap();
    let ok = rep.passed && diff - 1.96 * se > 0.0;
    report(
        "06 early-stage advantage",
        ok && elapsed.as_secs_f64() < 120.0,
        elapsed,
        &format!(
            "restricted-range return ahead by {:.4} (+/- {:.4}); lower bounds hold",
            diff,
            1.96 * se
        ),
    );
}

#[test]
fn criterion_07_late_stage_dominance() {
    let (rep, elapsed) = timed(|| convergence::steady_state_compare(&theory_cfg(), 0).unwrap());
    let ratio = rep.details["tail_mse_ratio"].as_f64().unwrap();
    let ok = rep.passed && (0.2..=0.3).contains(&ratio);
    report(
        "07 late-stage dominance",
        ok && elapsed.as_secs_f64() < 120.0,
        elapsed,
        &format!("tail MSE ratio {:.3} in [0.2, 0.3]; return ordering and bounds hold", ratio),
    );
}

#[test]
fn criterion_08_gradient_engine() {
    let (worst, elapsed) = timed(|| {
        let mut rng = substream(1234, StreamDomain::Theory, 0);
        let mut worst: f64 = 0.0;
        for instance in 0..20u64 {
            let d_obs = 2 + (instance as usize % 7);
            let d_act = 1 + (instance as usize % 4);
            let p = PolicyParams::init(d_obs, d_act, &[16], 100 + instance);
            let s: Vec<f64> = (0..d_obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let beta = 2.0;
            let mu = forward_mean(&p, &s).unwrap();
            let a = sample_latent(&mu, &p.sigma(), &mut rng);
            let a_exec: Vec<f64> = a.iter().map(|&x| squash(x, beta)).collect();

            // score_gradient against central differences of the transformed
            // log density
            let g = score_gradient(&p, &s, &a_exec, beta).unwrap();
            let flat = p.flatten();
            let h = 1e-5;
            let tlp = |flat: &[f64]| {
                let mut q = p.clone();
                q.set_from_flat(flat);
                let mu = forward_mean(&q, &s).unwrap();
                gpo_bench::policy::transformed_log_prob(&mu, &q.sigma(), beta, &a_exec).unwrap()
            };
            for _ in 0..64 {
                let mut dir: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|v| *v /= norm);
                let plus: Vec<f64> = flat.iter().zip(&dir).map(|(v, d)| v + h * d).collect();
                let minus: Vec<f64> = flat.iter().zip(&dir).map(|(v, d)| v - h * d).collect();
                let fd = (tlp(&plus) - tlp(&minus)) / (2.0 * h);
                let an: f64 = g.flat.iter().zip(&dir).map(|(a, d)| a * d).sum();
                let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-3);
                assert!(rel <= 1e-5, "score_gradient instance {instance}: rel {rel}");
                worst = worst.max(rel);
            }

            // backprop_loss on a composed scalar against central differences
            let batch = 4;
            let obs: Vec<f64> = (0..batch * d_obs).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let acts: Vec<f64> = (0..batch * d_act).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let old: Vec<f64> = (0..batch).map(|_| rng.gen_range(-3.0..-1.0)).collect();
            let adv: Vec<f64> = (0..batch).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let rets: Vec<f64> = (0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss_of = |q: &PolicyParams| {
                backprop_loss(q, Tensor::from_vec(batch, d_obs, obs.clone()), |pg| {
                    let lp = pg.latent_log_prob(Tensor::from_vec(batch, d_act, acts.clone()));
                    let ol = pg.graph.leaf(Tensor::from_vec(batch, 1, old.clone()));
                    let dlp = pg.graph.sub(lp, ol);
                    let ratio = pg.graph.exp_clamp(dlp, 1e-8, 1e8);
                    let ad = pg.graph.leaf(Tensor::from_vec(batch, 1, adv.clone()));
                    let surr = pg.graph.clipped_surrogate(ratio, ad, 0.2);
                    let surr = pg.graph.mean_all(surr);
                    let rt = pg.graph.leaf(Tensor::from_vec(batch, 1, rets.clone()));
                    let verr = pg.graph.sub(pg.value(), rt);
                    let v2 = pg.graph.square(verr);
                    let vl = pg.graph.mean_all(v2);
                    let vl = pg.graph.scale(vl, 0.5);
                    pg.graph.add(surr, vl)
                })
                .unwrap()
            };
            let (_, bg) = loss_of(&p);
            for _ in 0..64 {
                let mut dir: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|v| *v /= norm);
                let mut qp = p.clone();
                qp.set_from_flat(&flat.iter().zip(&dir).map(|(v, d)| v + h * d).collect::<Vec<_>>());
                let mut qm = p.clone();
                qm.set_from_flat(&flat.iter().zip(&dir).map(|(v, d)| v - h * d).collect::<Vec<_>>());
                let fd = (loss_of(&qp).0 - loss_of(&qm).0) / (2.0 * h);
                let an: f64 = bg.flat.iter().zip(&dir).map(|(a, d)| a * d).sum();
                let rel = (fd - an).abs() / (fd.abs() + an.abs() + 1e-3);
                assert!(rel <= 1e-5, "backprop_loss instance {instance}: rel {rel}");
                worst = worst.max(rel);
            }
        }
        worst
    });
    report(
        "08 gradient engine",
        elapsed.as_secs_f64() < 60.0,
        elapsed,
        &format!("20 instances x 64 directions x 2 gradient paths, worst rel err {worst:.2e}"),
    );
}

fn acceptance_config(output: &Path) -> RunConfig {
    let cfg_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
    cli::parse_config(Some(&cfg_path), &[], None, Some(output.to_path_buf())).unwrap()
}

struct SweepFixture {
    outcome: SweepOutcome,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

static SWEEP: OnceLock<SweepFixture> = OnceLock::new();

fn sweep() -> &'static SweepFixture {
    SWEEP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = acceptance_config(&dir.path().join("sweep"));
        let start = Instant::now();
        let outcome = cli::run_sweep(&cfg).unwrap();
        SweepFixture { outcome, elapsed: start.elapsed(), _dir: dir }
    })
}

#[test]
fn criterion_09_schedule_ordering() {
    let _lock = GATE.lock().unwrap();
    let fixture = sweep();
    let outcome = &fixture.outcome;
    assert!(outcome.failures.is_empty(), "sweep cells failed: {:?}", outcome.failures);

    let by_kind = |k: gpo_bench::growth::GrowthKind| {
        outcome.summaries.iter().find(|s| s.kind == k).expect("kind present")
    };
    use gpo_bench::growth::GrowthKind::*;
    let gom = by_kind(Gompertz);
    let (gm, _) = gom.final_mean_std();
    let mut detail = format!("final means:");
    let mut ok = true;
    for other in [NoGrowth, Linear, Sigmoid] {
        let s = by_kind(other);
        let (om, _) = s.final_mean_std();
        let se = pooled_stderr(&gom.final_returns, &s.final_returns);
        detail += &format!(" {:?}={:.3}", other, om);
        if gm < om - se {
            ok = false;
            detail += "(!)";
        }
    }
    detail += &format!(" gompertz={gm:.3}");
    // early-stage claim at the 20% checkpoint
    let (g20, _) = gom.checkpoint_mean_std();
    let (n20, _) = by_kind(NoGrowth).checkpoint_mean_std();
    detail += &format!("; at 20%: gompertz={g20:.3} vs no_growth={n20:.3}");
    if g20 < n20 {
        ok = false;
    }
    let elapsed = fixture.elapsed;
    report(
        "09 schedule ordering",
        ok && elapsed.as_secs_f64() < 1800.0,
        elapsed,
        &detail,
    );
}

fn pooled_stderr(a: &[f64], b: &[f64]) -> f64 {
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
    };
    (var(a) / a.len() as f64 + var(b) / b.len() as f64).sqrt()
}

#[test]
fn criterion_10_assumption_region() {
    let _lock = GATE.lock().unwrap();
    let fixture = sweep();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut rows_seen = 0usize;
    for cell in &fixture.outcome.cells {
        if cell.kind != gpo_bench::growth::GrowthKind::Gompertz {
            continue;
        }
        let mean = cell.rows.iter().map(|r| r.frac_outside_half).sum::<f64>()
            / cell.rows.len() as f64;
        worst = worst.max(mean);
        rows_seen += cell.rows.len();
    }
    let ok = rows_seen > 0 && worst <= 0.05;
    report(
        "10 assumption region",
        ok,
        start.elapsed(),
        &format!("worst per-seed mean |a/beta| > 0.5 fraction = {worst:.5} <= 0.05"),
    );
}

#[test]
fn criterion_11_fatigue_fixed_point() {
    let ((zeta, fixed), elapsed) = timed(|| {
        let dt = 0.005;
        let mut zeta = vec![0.0];
        for _ in 0..500 {
            zeta = fatigue_update(&zeta, &[1.0], dt, FATIGUE_GAMMA);
        }
        let fixed = FATIGUE_GAMMA * 1.0 * dt / (1.0 - FATIGUE_GAMMA);
        (zeta[0], fixed)
    });
    let ok = (zeta - fixed).abs() <= 1e-9;
    report(
        "11 fatigue fixed point",
        ok,
        elapsed,
        &format!("zeta after 500 steps = {zeta:.12}, closed form {fixed:.12}"),
    );
}

#[test]
fn criterion_12_reproducibility() {
    let (ok_detail, elapsed) = timed(|| {
        let sha = |p: &Path| -> String {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(std::fs::read(p).unwrap());
            format!("{:x}", h.finalize())
        };
        // train twice at identical (config, seed)
        let overrides: Vec<(String, String)> = vec![
            ("trainer.updates".into(), "5".into()),
            ("trainer.horizon".into(), "16".into()),
            ("trainer.n_envs".into(), "2".into()),
            ("trainer.hidden".into(), "[8, 8]".into()),
        ];
        let dir = tempfile::tempdir().unwrap();
        let mut hashes = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("train_{run}"));
            let cfg = cli::parse_config(None, &overrides, Some(7), Some(out.clone())).unwrap();
            cli::run_train(&cfg).unwrap();
            hashes.push((sha(&out.join("metrics.csv")), sha(&out.join("checkpoint_final.json"))));
        }
        let train_ok = hashes[0] == hashes[1];

        // verify twice at identical (config, seed)
        let t_overrides: Vec<(String, String)> = vec![
            ("theory.n_per_beta".into(), "2000".into()),
            ("theory.ratio_samples".into(), "500".into()),
            ("theory.conv_seeds".into(), "40".into()),
            ("theory.early_seeds".into(), "80".into()),
            ("theory.steady_seeds".into(), "40".into()),
            ("theory.steady_steps".into(), "1200".into()),
        ];
        let mut report_hashes = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("verify_{run}"));
            let cfg = cli::parse_config(None, &t_overrides, Some(7), Some(out.clone())).unwrap();
            cli::run_verify(&cfg).unwrap();
            let mut files: Vec<PathBuf> = std::fs::read_dir(out.join("reports"))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            files.sort();
            report_hashes.push(files.iter().map(|f| sha(f)).collect::<Vec<_>>());
        }
        let verify_ok = report_hashes[0] == report_hashes[1] && !report_hashes[0].is_empty();
        (train_ok, verify_ok)
    });
    let (train_ok, verify_ok) = ok_detail;
    report(
        "12 reproducibility",
        train_ok && verify_ok,
        elapsed,
        &format!("train hash-identical: {train_ok}; verify reports hash-identical: {verify_ok}"),
    );
}

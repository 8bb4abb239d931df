//! Quadratic-model simulations: the SGD convergence bound, the early-stage
//! return comparison, and the late-stage steady-state comparison.
//!
//! Protocols are compared under paired noise: both consume the same
//! standard-normal draws (rngs recreated from one substream), scaled by
//! their own `beta_t`. Monte-Carlo wiggle is absorbed by 1.96-stderr edges
//! on every comparison, so violations mean the claim itself failed.

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::quadratic::{simulate_mse_path, PathPoint, QuadraticModel};
use super::{BoundReport, TheoryConfig, TheoryError};
use crate::growth::{GrowthKind, GrowthSchedule};
use crate::rng::{substream, StreamDomain};

const STREAM_CONV: u64 = 4 << 20;
const STREAM_PLATEAU: u64 = 5 << 20;
const STREAM_EARLY: u64 = 6 << 20;
const STREAM_STEADY: u64 = 7 << 20;
const STREAM_MODEL: u64 = 8 << 20;

/// Shared quadratic instance for all three checks, with the step-size
/// precondition `eta <= mu / L^2` enforced before any simulation runs.
fn default_model(cfg: &TheoryConfig, seed: u64) -> Result<QuadraticModel, TheoryError> {
    let mut rng = substream(seed, StreamDomain::Theory, STREAM_MODEL);
    let model = QuadraticModel::random(
        cfg.quad_dim,
        cfg.eig_min,
        cfg.eig_max,
        cfg.noise_c,
        cfg.eta,
        &mut rng,
    )?;
    if cfg.eta > model.eta_max() {
        return Err(TheoryError::Precondition(format!(
            "eta = {} exceeds mu/L^2 = {}",
            cfg.eta,
            model.eta_max()
        )));
    }
    Ok(model)
}

fn e0_vector(dim: usize, norm: f64) -> Vec<f64> {
    vec![norm / (dim as f64).sqrt(); dim]
}

/// Desk-shape Gompertz rising over `[0, span]` with its midpoint at
/// `mid_frac * span` (`k t0 = 0.72` preserved from the reference shape).
fn gompertz_over(span: usize, mid_frac: f64, limit: f64) -> GrowthSchedule {
    let t0 = mid_frac * span as f64;
    GrowthSchedule { kind: GrowthKind::Gompertz, k: 0.72 / t0, t0, a_limit: limit }
}

/// Mean and stderr of `||e_t||^2` (and of the quadratic form) over seeds.
struct MeanPath {
    mean_sq: Vec<f64>,
    stderr_sq: Vec<f64>,
}

fn mean_path(
    model: &QuadraticModel,
    beta_at: &dyn Fn(usize) -> f64,
    e0: &[f64],
    steps: usize,
    n_seeds: usize,
    seed: u64,
    stream_base: u64,
) -> MeanPath {
    let mut sum = vec![0.0; steps + 1];
    let mut sum_sq = vec![0.0; steps + 1];
    for i in 0..n_seeds {
        let mut rng: ChaCha8Rng = substream(seed, StreamDomain::Theory, stream_base + i as u64);
        let path = simulate_mse_path(model, beta_at, e0, steps, &mut rng);
        for (t, p) in path.iter().enumerate() {
            sum[t] += p.sq_err;
            sum_sq[t] += p.sq_err * p.sq_err;
        }
    }
    let n = n_seeds as f64;
    let mean_sq: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let stderr_sq: Vec<f64> = sum_sq
        .iter()
        .zip(&mean_sq)
        .map(|(ss, m)| ((ss / n - m * m).max(0.0) / n).sqrt())
        .collect();
    MeanPath { mean_sq, stderr_sq }
}

/// The convergence bound
/// `E||e_t||^2 <= (1 - eta mu)^t ||e_0||^2 + (eta/mu) c beta_t^2`,
/// tested under a constant range and a piecewise-constant growing range
/// (bound evaluated at the current `beta_t`), plus the `beta^2` plateau law.
pub fn sgd_convergence_check(cfg: &TheoryConfig, seed: u64) -> Result<BoundReport, TheoryError> {
    let model = default_model(cfg, seed)?;
    let e0 = e0_vector(model.dim, cfg.e0_norm);
    let e0_sq = cfg.e0_norm * cfg.e0_norm;
    let steps = cfg.conv_steps;
    let decay = 1.0 - model.eta * model.mu;
    let bound_at = |t: usize, beta: f64| {
        decay.powi(t as i32) * e0_sq + model.eta / model.mu * model.c * beta * beta
    };

    let mut violations = 0usize;
    let mut worst_excess = f64::NEG_INFINITY; // mean - (bound + CI), max over t
    let mut peak = (0.0f64, 0.0f64); // (max mean, bound there)

    // constant range
    let beta_const = cfg.beta_max;
    let const_path =
        mean_path(&model, &|_| beta_const, &e0, steps, cfg.conv_seeds, seed, STREAM_CONV);
    // piecewise-constant growing range: a 12-stair Gompertz staircase
    let stair = (steps / 12).max(1);
    let sched = gompertz_over(steps, 0.6, cfg.beta_max);
    let beta_pc = move |t: usize| sched.beta(((t / stair) * stair) as f64);
    let pc_path = mean_path(&model, &beta_pc, &e0, steps, cfg.conv_seeds, seed, STREAM_CONV);

    let mut const_viol = 0usize;
    let mut pc_viol = 0usize;
    for t in 0..=steps {
        for (path, beta_t, viol) in [
            (&const_path, beta_const, &mut const_viol),
            (&pc_path, beta_pc(t), &mut pc_viol),
        ] {
            let bound = bound_at(t, beta_t);
            let ci = 1.96 * path.stderr_sq[t];
            let excess = path.mean_sq[t] - (bound + ci);
            worst_excess = worst_excess.max(excess);
            if excess > 0.0 {
                *viol += 1;
            }
            if path.mean_sq[t] > peak.0 {
                peak = (path.mean_sq[t], bound);
            }
        }
    }
    violations += const_viol + pc_viol;

    // plateau law: steady-state MSE scales as beta^2 (ratio ~ 4 for beta vs beta/2)
    let full = mean_path(&model, &|_| beta_const, &e0, steps, cfg.conv_seeds, seed, STREAM_PLATEAU);
    let half = mean_path(
        &model,
        &|_| beta_const / 2.0,
        &e0,
        steps,
        cfg.conv_seeds,
        seed,
        STREAM_PLATEAU,
    );
    let tail_from = steps - steps / 4;
    let tail_mean = |p: &MeanPath| -> f64 {
        let vals = &p.mean_sq[tail_from..];
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let plateau_ratio = tail_mean(&full) / tail_mean(&half);
    if !(3.5..=4.5).contains(&plateau_ratio) {
        violations += 1;
    }

    let samples = cfg.conv_seeds * (steps + 1) * 2;
    let mut rep = BoundReport::new("convergence_bound", samples, peak.0, peak.1, violations);
    rep.margin = -worst_excess;
    Ok(rep.with_details(json!({
        "mu": model.mu,
        "l": model.l,
        "eta": model.eta,
        "eta_max": model.eta_max(),
        "steps": steps,
        "seeds": cfg.conv_seeds,
        "constant_violations": const_viol,
        "piecewise_violations": pc_viol,
        "plateau_ratio": plateau_ratio,
        "plateau_range": [3.5, 4.5],
        "final_mean_const": const_path.mean_sq[steps],
        "final_bound_const": bound_at(steps, beta_const),
    })))
}

struct PairedOutcome {
    j_gpo: Vec<f64>,
    j_fixed: Vec<f64>,
    norm_gpo: Vec<f64>,
    norm_fixed: Vec<f64>,
}

/// Run both protocols at matched noise draws; returns per-seed terminal (or
/// tail-averaged) statistics.
fn paired_runs(
    model: &QuadraticModel,
    beta_gpo: &dyn Fn(usize) -> f64,
    beta_fixed: f64,
    e0: &[f64],
    steps: usize,
    n_seeds: usize,
    seed: u64,
    stream_base: u64,
    tail: Option<usize>,
) -> PairedOutcome {
    let mut out = PairedOutcome {
        j_gpo: Vec::with_capacity(n_seeds),
        j_fixed: Vec::with_capacity(n_seeds),
        norm_gpo: Vec::with_capacity(n_seeds),
        norm_fixed: Vec::with_capacity(n_seeds),
    };
    let reduce = |path: &[PathPoint]| -> (f64, f64) {
        match tail {
            // tail-averaged return gap and squared error
            Some(from) => {
                let w = &path[from..];
                let n = w.len() as f64;
                let quad = w.iter().map(|p| p.quad).sum::<f64>() / n;
                let sq = w.iter().map(|p| p.sq_err).sum::<f64>() / n;
                (model.j_star - 0.5 * quad, sq)
            }
            None => {
                let p = path.last().unwrap();
                (model.j_star - 0.5 * p.quad, p.sq_err)
            }
        }
    };
    for i in 0..n_seeds {
        let mut rng_a = substream(seed, StreamDomain::Theory, stream_base + i as u64);
        let path_a = simulate_mse_path(model, beta_gpo, e0, steps, &mut rng_a);
        let mut rng_b = substream(seed, StreamDomain::Theory, stream_base + i as u64);
        let path_b = simulate_mse_path(model, &|_| beta_fixed, e0, steps, &mut rng_b);
        let (ja, sa) = reduce(&path_a);
        let (jb, sb) = reduce(&path_b);
        out.j_gpo.push(ja);
        out.norm_gpo.push(sa);
        out.j_fixed.push(jb);
        out.norm_fixed.push(sb);
    }
    out
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, (var / n).sqrt())
}

/// Early-stage comparison at `T1` chosen so the transient has decayed to
/// `eps^2`: the restricted-range protocol must end with a strictly higher
/// mean return (paired 95% CI), and both protocols must respect their
/// return lower bounds `J* - (mu/2)(eps^2 + (eta c / mu) beta^2)` and
/// distance bounds `eps + sqrt(eta c / mu) beta`.
pub fn early_return_compare(cfg: &TheoryConfig, seed: u64) -> Result<BoundReport, TheoryError> {
    let model = default_model(cfg, seed)?;
    let e0 = e0_vector(model.dim, cfg.e0_norm);
    let eps = cfg.epsilon_frac * cfg.e0_norm;
    let decay = 1.0 - model.eta * model.mu;
    let t1 = ((eps * eps / (cfg.e0_norm * cfg.e0_norm)).ln() / decay.ln()).ceil() as usize;
    let sched = gompertz_over(t1, 0.6, cfg.beta_max);
    let beta_t1 = sched.beta(t1 as f64);

    let outcome = paired_runs(
        &model,
        &|t| sched.beta(t as f64),
        cfg.beta_max,
        &e0,
        t1,
        cfg.early_seeds,
        seed,
        STREAM_EARLY,
        None,
    );

    let (mean_jg, se_jg) = mean_stderr(&outcome.j_gpo);
    let (mean_jf, se_jf) = mean_stderr(&outcome.j_fixed);
    let diffs: Vec<f64> =
        outcome.j_gpo.iter().zip(&outcome.j_fixed).map(|(a, b)| a - b).collect();
    let (mean_d, se_d) = mean_stderr(&diffs);

    let mut violations = 0usize;
    // paired CI separation: GPO strictly ahead
    let separation = mean_d - 1.96 * se_d;
    if separation <= 0.0 {
        violations += 1;
    }
    // return lower bounds per protocol
    let j_bound = |beta: f64| {
        model.j_star
            - 0.5 * model.mu * (eps * eps + model.eta * model.c / model.mu * beta * beta)
    };
    if mean_jg < j_bound(beta_t1) - 1.96 * se_jg {
        violations += 1;
    }
    if mean_jf < j_bound(cfg.beta_max) - 1.96 * se_jf {
        violations += 1;
    }
    // distance bounds: E||e_T1|| <= eps + sqrt(eta c / mu) beta
    let dist_bound = |beta: f64| eps + (model.eta * model.c / model.mu).sqrt() * beta;
    let norms_g: Vec<f64> = outcome.norm_gpo.iter().map(|s| s.sqrt()).collect();
    let norms_f: Vec<f64> = outcome.norm_fixed.iter().map(|s| s.sqrt()).collect();
    let (mean_ng, se_ng) = mean_stderr(&norms_g);
    let (mean_nf, se_nf) = mean_stderr(&norms_f);
    if mean_ng > dist_bound(beta_t1) + 1.96 * se_ng {
        violations += 1;
    }
    if mean_nf > dist_bound(cfg.beta_max) + 1.96 * se_nf {
        violations += 1;
    }

    let mut rep =
        BoundReport::new("early_return", cfg.early_seeds, mean_jf, mean_jg, violations);
    rep.margin = separation;
    Ok(rep.with_details(json!({
        "t1": t1,
        "eps": eps,
        "beta_t1": beta_t1,
        "beta_max": cfg.beta_max,
        "mean_return_gpo": mean_jg,
        "mean_return_fixed": mean_jf,
        "paired_diff": mean_d,
        "paired_diff_stderr": se_d,
        "return_bound_gpo": j_bound(beta_t1),
        "return_bound_fixed": j_bound(cfg.beta_max),
        "mean_dist_gpo": mean_ng,
        "mean_dist_fixed": mean_nf,
        "dist_bound_gpo": dist_bound(beta_t1),
        "dist_bound_fixed": dist_bound(cfg.beta_max),
    })))
}

/// Late-stage comparison: a schedule converging to `beta_inf = beta_max / 2`
/// must show a tail MSE ratio near `1/4` (in `[0.2, 0.3]`), a no-worse tail
/// return (paired CI), and both tails below `eta^2 c beta^2 / (1 - rho)`.
pub fn steady_state_compare(cfg: &TheoryConfig, seed: u64) -> Result<BoundReport, TheoryError> {
    let model = default_model(cfg, seed)?;
    let e0 = e0_vector(model.dim, cfg.e0_norm);
    let steps = cfg.steady_steps;
    let beta_inf = cfg.beta_max / 2.0;
    // saturates well before the tail window opens
    let sched = gompertz_over(steps, 0.05, beta_inf);
    let tail_from = steps - steps / 4;

    let outcome = paired_runs(
        &model,
        &|t| sched.beta(t as f64),
        cfg.beta_max,
        &e0,
        steps,
        cfg.steady_seeds,
        seed,
        STREAM_STEADY,
        Some(tail_from),
    );

    let (tail_g, se_g) = mean_stderr(&outcome.norm_gpo);
    let (tail_f, se_f) = mean_stderr(&outcome.norm_fixed);
    let ratio = tail_g / tail_f;
    let mut violations = 0usize;
    if !(0.2..=0.3).contains(&ratio) {
        violations += 1;
    }
    // no-worse tail return within the paired CI
    let jdiffs: Vec<f64> =
        outcome.j_gpo.iter().zip(&outcome.j_fixed).map(|(a, b)| a - b).collect();
    let (mean_jd, se_jd) = mean_stderr(&jdiffs);
    if mean_jd < -1.96 * se_jd {
        violations += 1;
    }
    // steady-state bounds
    let mse_bound =
        |beta: f64| model.eta * model.eta * model.c * beta * beta / (1.0 - model.rho);
    if tail_g > mse_bound(beta_inf) + 1.96 * se_g {
        violations += 1;
    }
    if tail_f > mse_bound(cfg.beta_max) + 1.96 * se_f {
        violations += 1;
    }

    let mut rep = BoundReport::new("steady_state", cfg.steady_seeds, ratio, 0.3, violations);
    rep.margin = (ratio - 0.2).min(0.3 - ratio);
    Ok(rep.with_details(json!({
        "steps": steps,
        "tail_from": tail_from,
        "beta_inf": beta_inf,
        "beta_max": cfg.beta_max,
        "rho": model.rho,
        "tail_mse_gpo": tail_g,
        "tail_mse_fixed": tail_f,
        "tail_mse_ratio": ratio,
        "mse_bound_gpo": mse_bound(beta_inf),
        "mse_bound_fixed": mse_bound(cfg.beta_max),
        "tail_return_diff": mean_jd,
        "tail_return_diff_stderr": se_jd,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_cfg() -> TheoryConfig {
        TheoryConfig {
            conv_steps: 400,
            conv_seeds: 80,
            early_seeds: 150,
            steady_steps: 1500,
            steady_seeds: 80,
            ..TheoryConfig::default()
        }
    }

    #[test]
    fn convergence_bound_holds() {
        let rep = sgd_convergence_check(&fast_cfg(), 1).unwrap();
        assert!(rep.passed, "{rep:?}");
        let ratio = rep.details["plateau_ratio"].as_f64().unwrap();
        assert!((3.5..=4.5).contains(&ratio), "plateau ratio {ratio}");
    }

    #[test]
    fn early_return_advantage_holds() {
        let rep = early_return_compare(&fast_cfg(), 2).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.details["mean_return_gpo"].as_f64() > rep.details["mean_return_fixed"].as_f64());
    }

    #[test]
    fn steady_state_dominance_holds() {
        let rep = steady_state_compare(&fast_cfg(), 3).unwrap();
        assert!(rep.passed, "{rep:?}");
        let ratio = rep.details["tail_mse_ratio"].as_f64().unwrap();
        assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn identical_protocols_coincide_exactly() {
        // schedule pinned at beta_max: the paired trajectories share noise
        // and dynamics, so every per-seed statistic matches bitwise
        let cfg = fast_cfg();
        let model = default_model(&cfg, 4).unwrap();
        let e0 = e0_vector(model.dim, cfg.e0_norm);
        let out = paired_runs(
            &model,
            &|_| cfg.beta_max,
            cfg.beta_max,
            &e0,
            100,
            20,
            4,
            STREAM_EARLY,
            None,
        );
        for i in 0..20 {
            assert_eq!(out.j_gpo[i], out.j_fixed[i]);
            assert_eq!(out.norm_gpo[i], out.norm_fixed[i]);
        }
    }

    #[test]
    fn step_size_precondition_gates_the_checks() {
        let cfg = TheoryConfig { eta: 0.2, ..fast_cfg() }; // mu/L^2 = 0.125
        assert!(matches!(
            sgd_convergence_check(&cfg, 0),
            Err(TheoryError::Precondition(_))
        ));
    }
}

//! Numerical verification of the optimization-theory claims behind the
//! growing action space: update-ratio equivalence, the gradient-distortion
//! bound, quadratic variance growth and inverse SNR scaling, the SGD
//! convergence bound, the early-stage return advantage, and late-stage
//! steady-state dominance — each evaluated at the tightest admissible
//! configuration and reported with explicit margins.
//!
//! Every check is a pure function of `(config, seed)`: Monte-Carlo seeds fan
//! out over named substreams and reduce in seed order, so reports are
//! reproducible byte for byte.

pub mod checks;
pub mod convergence;
pub mod quadratic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("run artifacts: {0}")]
    Audit(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// `(sinh(1) - 1) / 2`: the sup of `|arctanh(u) - u/(1-u^2)|` over
/// `|u| <= tanh(1/2)`, frozen from a high-precision evaluation.
pub const GRAD_DIFF_CONSTANT: f64 = 0.087600596821900728;

/// Verification-suite parameters. Defaults run every check at the sizes the
/// acceptance gate expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Range sweep for the variance / SNR checks.
    pub betas: Vec<f64>,
    pub n_per_beta: usize,
    /// Policy standard deviation held fixed during sweeps.
    pub sigma: f64,
    /// Advantage standard deviation for the variance sweep.
    pub sigma_a: f64,
    /// Advantage-noise scale per unit beta for the SNR sweep.
    pub snr_noise_scale: f64,
    /// Signal-channel gain for the SNR sweep (keeps the mean-gradient
    /// estimate well conditioned at the largest ranges).
    pub snr_signal_scale: f64,
    /// Sample count for the ratio-equivalence check.
    pub ratio_samples: usize,
    /// Executed-action grid size per `beta_t` in the gradient-difference sweep.
    pub grad_diff_points: usize,
    /// Quadratic-model shape.
    pub quad_dim: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    pub eta: f64,
    pub noise_c: f64,
    pub beta_max: f64,
    /// Initial error norm for the quadratic simulations.
    pub e0_norm: f64,
    pub conv_steps: usize,
    pub conv_seeds: usize,
    pub early_seeds: usize,
    /// Transient target for the early comparison: `eps = epsilon_frac * ||e0||`.
    pub epsilon_frac: f64,
    pub steady_steps: usize,
    pub steady_seeds: usize,
    /// Mean `|a/beta| > 0.5` fraction allowed by the assumption-region audit.
    pub audit_threshold: f64,
    /// Metrics CSV to audit; the audit check is skipped when unset.
    pub metrics_csv: Option<String>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            betas: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            n_per_beta: 100_000,
            sigma: 1.0,
            sigma_a: 2.0,
            snr_noise_scale: 1.0,
            snr_signal_scale: 2.0,
            ratio_samples: 10_000,
            grad_diff_points: 2_000,
            quad_dim: 4,
            eig_min: 0.5,
            eig_max: 2.0,
            eta: 0.1,
            noise_c: 1.0,
            beta_max: 1.0,
            e0_norm: 3.0,
            conv_steps: 600,
            conv_seeds: 200,
            early_seeds: 500,
            epsilon_frac: 0.01,
            steady_steps: 4000,
            steady_seeds: 200,
            audit_threshold: 0.05,
            metrics_csv: None,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.betas.is_empty() || self.betas.iter().any(|b| *b <= 0.0) {
            return Err("betas must be a non-empty list of positive values".into());
        }
        let mut sorted = self.betas.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted != self.betas {
            return Err("betas must be sorted ascending".into());
        }
        if !(self.sigma > 0.0) || !(self.sigma_a >= 0.0) {
            return Err("sigma must be > 0 and sigma_a >= 0".into());
        }
        if !(self.eta > 0.0) {
            return Err("eta must be > 0".into());
        }
        if !(self.eig_min > 0.0 && self.eig_max >= self.eig_min) {
            return Err("eigenvalue range must satisfy 0 < eig_min <= eig_max".into());
        }
        if !(self.audit_threshold > 0.0 && self.audit_threshold <= 1.0) {
            return Err("audit_threshold must be in (0,1]".into());
        }
        Ok(())
    }
}

/// Outcome of one bound check. `violations == 0` means the claim held at
/// every probed point; `margin` is the worst-case slack that remained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub samples: usize,
    pub max_lhs: f64,
    pub bound: f64,
    pub violations: usize,
    pub margin: f64,
    pub passed: bool,
    pub details: serde_json::Value,
}

impl BoundReport {
    pub fn new(name: &str, samples: usize, max_lhs: f64, bound: f64, violations: usize) -> Self {
        BoundReport {
            name: name.to_string(),
            samples,
            max_lhs,
            bound,
            violations,
            margin: bound - max_lhs,
            passed: violations == 0,
            details: serde_json::Value::Null,
        }
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = details;
        self
    }
}

/// Run every check in the default suite order. The assumption-region audit
/// joins the list when a metrics file is configured. Individual failures are
/// aggregated in the reports, never short-circuited; only precondition
/// violations abort.
pub fn run_suite(cfg: &TheoryConfig, seed: u64) -> Result<Vec<BoundReport>, TheoryError> {
    cfg.validate().map_err(TheoryError::Precondition)?;
    let mut reports = vec![
        checks::ratio_invariance_check(cfg, seed)?,
        checks::gradient_difference_sweep(cfg, seed)?,
        checks::empirical_variance_sweep(cfg, seed)?,
        checks::snr_sweep(cfg, seed)?,
        convergence::sgd_convergence_check(cfg, seed)?,
        convergence::early_return_compare(cfg, seed)?,
        convergence::steady_state_compare(cfg, seed)?,
    ];
    if let Some(path) = &cfg.metrics_csv {
        reports.push(checks::assumption_region_audit(
            std::path::Path::new(path),
            cfg.audit_threshold,
        )?);
    }
    Ok(reports)
}

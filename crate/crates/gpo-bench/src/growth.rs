//! Growth schedules and the smooth action-space transform.
//!
//! A schedule maps the trainer's update index `t` to a factor `f(t) in (0, 1]`
//! which scales the maximum executable action: `beta_t = a_limit * f(t)`.
//! Executed actions are produced by the smooth squash
//! `squash(a, beta) = beta * tanh(a / beta)`, which is near-identity for
//! `|a| << beta` and saturates at `±beta` instead of hard-clipping.
//!
//! All functions here are pure; they may be called concurrently from any
//! number of rollout workers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to every schedule so `beta_t > 0` always holds (the squash
/// transform divides by `beta_t`).
pub const F_MIN: f64 = 1e-3;

/// Relative clamp below saturation for the inverse transform: `unsquash`
/// rejects inputs with `|a_exec / beta| >= 1 - EPS_CLAMP`.
pub const EPS_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid schedule parameter {name}={value}: {why}")]
    BadParam {
        name: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error("schedule is not monotone non-decreasing on [0, {horizon}] (f({t1})={f1} > f({t2})={f2})")]
    NonMonotone {
        horizon: f64,
        t1: f64,
        f1: f64,
        t2: f64,
        f2: f64,
    },
    #[error("schedule does not approach 1: f({t}) = {f} < {required}")]
    LimitNotReached { t: f64, f: f64, required: f64 },
}

/// Inverse-transform input was numerically on the saturation boundary.
#[derive(Debug, Clone, Copy, Error)]
#[error("executed action at saturation boundary: |a_exec/beta| = {ratio} >= {limit}")]
pub struct SaturationError {
    pub ratio: f64,
    pub limit: f64,
}

/// Growth-function families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthKind {
    /// `f(t) = 1`: the fixed-range baseline (plain PPO).
    NoGrowth,
    /// `f(t) = clip(k t, 0, 1)`, floored at [`F_MIN`].
    Linear,
    /// `f(t) = 1 / (1 + exp(-|k| (t - t0)))`.
    Sigmoid,
    /// `f(t) = exp(-exp(-k (t - t0)))`: slow start, accelerating mid-phase.
    Gompertz,
}

/// A named growth function with its parameters plus the action limit it
/// scales. `beta(t) = a_limit * value(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthSchedule {
    pub kind: GrowthKind,
    /// Rate parameter, per update. Sign conventions per kind: `linear` and
    /// `gompertz` require `k > 0`; `sigmoid` uses `|k|` (the increasing
    /// branch) regardless of the sign it was given.
    pub k: f64,
    /// Midpoint / shift in updates (`sigmoid`, `gompertz`); for `linear` it
    /// records the saturation time `1/k` and for `no_growth` it is unused.
    pub t0: f64,
    /// Maximum executable action magnitude, actuator units.
    pub a_limit: f64,
}

impl GrowthSchedule {
    pub fn no_growth(a_limit: f64) -> Self {
        Self { kind: GrowthKind::NoGrowth, k: 0.0, t0: 0.0, a_limit }
    }

    /// Schedule factor `f(t) in (0, 1]`, floored at [`F_MIN`].
    pub fn value(&self, t: f64) -> f64 {
        let raw = match self.kind {
            GrowthKind::NoGrowth => 1.0,
            GrowthKind::Linear => (self.k * t).clamp(0.0, 1.0),
            GrowthKind::Sigmoid => 1.0 / (1.0 + (-self.k.abs() * (t - self.t0)).exp()),
            GrowthKind::Gompertz => (-(-self.k * (t - self.t0)).exp()).exp(),
        };
        raw.max(F_MIN)
    }

    /// Effective action range `beta_t = a_limit * f(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        self.a_limit * self.value(t)
    }

    /// Check the schedule invariants: parameters in range, `f` monotone
    /// non-decreasing on `[0, 10 t0]`, and `f(10 t0)` at its limit.
    pub fn validate(&self) -> Result<(), GrowthError> {
        if !(self.a_limit > 0.0) || !self.a_limit.is_finite() {
            return Err(GrowthError::BadParam {
                name: "a_limit",
                value: self.a_limit,
                why: "must be finite and > 0",
            });
        }
        if !self.k.is_finite() || !self.t0.is_finite() {
            return Err(GrowthError::BadParam {
                name: "k",
                value: self.k,
                why: "k and t0 must be finite",
            });
        }
        match self.kind {
            GrowthKind::NoGrowth => return Ok(()),
            GrowthKind::Linear | GrowthKind::Gompertz => {
                if self.k <= 0.0 {
                    return Err(GrowthError::BadParam {
                        name: "k",
                        value: self.k,
                        why: "must be > 0 for an increasing schedule",
                    });
                }
            }
            GrowthKind::Sigmoid => {
                if self.k == 0.0 {
                    return Err(GrowthError::BadParam {
                        name: "k",
                        value: self.k,
                        why: "must be nonzero",
                    });
                }
            }
        }
        // Saturation horizon: at least 10*t0, extended to t0 + 12/k for the
        // shifted kinds whose convergence scale is 1/k. (The reference
        // Gompertz parameters have k*t0 = 0.72 and only reach 0.9985 by
        // 10*t0, so the limit check must look a little farther out.)
        let horizon = match self.kind {
            GrowthKind::Linear => 10.0 / self.k,
            _ => (10.0 * self.t0).max(self.t0 + 12.0 / self.k.abs()),
        };
        if horizon <= 0.0 {
            return Err(GrowthError::BadParam {
                name: "t0",
                value: self.t0,
                why: "must be > 0",
            });
        }
        let steps = 2000;
        let mut prev = self.value(0.0);
        for i in 1..=steps {
            let t = horizon * i as f64 / steps as f64;
            let f = self.value(t);
            if f + 1e-12 < prev {
                let t1 = horizon * (i - 1) as f64 / steps as f64;
                return Err(GrowthError::NonMonotone { horizon, t1, f1: prev, t2: t, f2: f });
            }
            prev = f;
        }
        let required = match self.kind {
            GrowthKind::Sigmoid | GrowthKind::Gompertz => 0.999,
            GrowthKind::Linear | GrowthKind::NoGrowth => 1.0,
        };
        let f_end = self.value(horizon);
        if f_end < required {
            return Err(GrowthError::LimitNotReached { t: horizon, f: f_end, required });
        }
        Ok(())
    }
}

/// `beta * tanh(a / beta)`: odd, strictly increasing, `|result| < beta`.
///
/// `tanh` rounds to exactly 1.0 in f64 beyond `|a/beta| ~ 19`; the result is
/// clamped two ulps inside the limit so the strict bound survives rounding.
pub fn squash(a: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let limit = beta * (1.0 - f64::EPSILON);
    (beta * (a / beta).tanh()).clamp(-limit, limit)
}

/// Inverse of [`squash`]: `beta * atanh(a_exec / beta)`.
///
/// Inputs within [`EPS_CLAMP`] of the boundary are rejected rather than
/// mapped to huge latents.
pub fn unsquash(a_exec: f64, beta: f64) -> Result<f64, SaturationError> {
    debug_assert!(beta > 0.0);
    let u = a_exec / beta;
    let limit = 1.0 - EPS_CLAMP;
    if u.abs() >= limit {
        return Err(SaturationError { ratio: u.abs(), limit });
    }
    Ok(beta * u.atanh())
}

/// Derivative `d squash / d a = 1 - tanh^2(a / beta)`, in `(0, 1]`.
pub fn squash_jacobian(a: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    let th = (a / beta).tanh();
    1.0 - th * th
}

/// A squash transform pinned to one `beta`, for callers that thread the
/// current range around as a value.
#[derive(Debug, Clone, Copy)]
pub struct SquashTransform {
    beta: f64,
}

impl SquashTransform {
    /// `beta` must be positive and finite.
    pub fn new(beta: f64) -> Result<Self, GrowthError> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(GrowthError::BadParam {
                name: "beta",
                value: beta,
                why: "must be finite and > 0",
            });
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn squash(&self, a: f64) -> f64 {
        squash(a, self.beta)
    }

    pub fn unsquash(&self, a_exec: f64) -> Result<f64, SaturationError> {
        unsquash(a_exec, self.beta)
    }

    pub fn jacobian(&self, a: f64) -> f64 {
        squash_jacobian(a, self.beta)
    }
}

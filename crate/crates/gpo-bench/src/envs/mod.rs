//! Deterministic toy torque-controlled environments.
//!
//! Two tasks expose the same torque-limited, tracking-reward structure as a
//! legged-robot command-tracking problem, small enough to run thousands of
//! training sweeps on a desk:
//!
//! - [`EnvKind::PointMassTrack`]: a point mass with planar velocity commands
//!   `(v_x, v_y)` plus a height target `h` on a third axis, each axis an
//!   independent double integrator (`m = 1`, no drag, no gravity).
//! - [`EnvKind::PendulumSwingup`]: a torque-limited pendulum (`a_limit` below
//!   the gravity torque, so reaching high tip-height targets needs pumping).
//!
//! Rewards follow the robot reward-table shape: bounded tracking kernels
//! `phi(e) = exp(-e^2 / 0.25)` with weights `10dt / 5dt / 7dt`, a fatigue
//! penalty `-0.05 dt * zeta |tau| / a_limit`, and a joint-acceleration
//! penalty `-1e-6 dt * qddot^2`. With `cmd_scaling` on, command targets are
//! attenuated by the schedule factor `f(t)`, so the tracked target grows with
//! the action range.
//!
//! Robot-observation analogues: the angular-velocity entry is the pendulum's
//! rate (point mass: its velocity vector already appears), and the gravity
//! vector becomes a constant `-1` indicator. Observations expose the
//! *effective* (scaled) command, previous torque normalized by `a_limit`, and
//! the fatigue accumulator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fatigue discount from the accumulator recursion `zeta' = (zeta + |tau| dt) * gamma`.
pub const FATIGUE_GAMMA: f64 = 0.95;

/// Tracking kernel width: `phi(e) = exp(-e^2 / PHI_WIDTH)`.
pub const PHI_WIDTH: f64 = 0.25;

/// Divergence guard: episode ends when any `|q|` or `|qdot|` exceeds this.
pub const DIVERGENCE_GUARD: f64 = 1e3;

/// Default point-mass command ranges: `v_x, v_y ~ U[-V, V]`, `h ~ U[-H, H]`.
pub const PM_V_CMD_RANGE: f64 = 0.4;
pub const PM_H_CMD_RANGE: f64 = 0.25;
/// Point-mass reset ranges: velocities cover the command span so every
/// batch sees informative tracking errors; height starts within its target
/// range.
pub const PM_RESET_V_RANGE: f64 = 0.5;
pub const PM_RESET_H_RANGE: f64 = 0.3;
/// Pendulum reset range (near the bottom, at rest).
pub const PEND_RESET_RANGE: f64 = 0.1;
/// Pendulum tip-height command range `[PEND_H_CMD_LO, PEND_H_CMD_HI]`.
pub const PEND_H_CMD_LO: f64 = 0.5;
pub const PEND_H_CMD_HI: f64 = 1.0;

const PEND_GRAVITY: f64 = 9.81;
const PEND_MASS: f64 = 1.0;
const PEND_LENGTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("non-finite torque input at index {0}")]
    NonFiniteInput(usize),
    #[error("torque dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMassTrack,
    PendulumSwingup,
}

/// Static task description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub d_act: usize,
    /// Maximum executable torque magnitude, actuator units.
    pub a_limit: f64,
    /// Control time step, seconds.
    pub dt: f64,
    /// Episode length, steps.
    pub horizon: usize,
    /// Scale command targets by the schedule factor `f(t)`.
    pub cmd_scaling: bool,
    /// Velocity-command half-range (point mass; unused by the pendulum).
    pub v_cmd_range: f64,
    /// Height-command scale: half-range for the point mass, upper bound of
    /// the tip-height target for the pendulum (lower bound 0.5).
    pub h_cmd_range: f64,
}

impl EnvSpec {
    pub fn point_mass(horizon: usize, cmd_scaling: bool) -> Self {
        EnvSpec {
            kind: EnvKind::PointMassTrack,
            d_act: 3,
            a_limit: 32.0,
            dt: 0.005,
            horizon,
            cmd_scaling,
            v_cmd_range: PM_V_CMD_RANGE,
            h_cmd_range: PM_H_CMD_RANGE,
        }
    }

    pub fn pendulum(horizon: usize, cmd_scaling: bool) -> Self {
        EnvSpec {
            kind: EnvKind::PendulumSwingup,
            d_act: 1,
            a_limit: 8.0,
            dt: 0.005,
            horizon,
            cmd_scaling,
            v_cmd_range: 0.0,
            h_cmd_range: PEND_H_CMD_HI,
        }
    }

    /// Generalized-coordinate count (`q`, `qdot` length).
    pub fn d_q(&self) -> usize {
        match self.kind {
            EnvKind::PointMassTrack => 3,
            EnvKind::PendulumSwingup => 1,
        }
    }

    /// Command vector length.
    pub fn d_cmd(&self) -> usize {
        match self.kind {
            EnvKind::PointMassTrack => 3,
            EnvKind::PendulumSwingup => 1,
        }
    }

    /// Observation width: qdot, task coordinates, effective command,
    /// normalized previous torque, fatigue, gravity indicator.
    pub fn d_obs(&self) -> usize {
        match self.kind {
            // [vx, vy, vz, z, cmd(3), tau_prev(3), zeta(3), g]
            EnvKind::PointMassTrack => 14,
            // [cos th, sin th, thdot, cmd(1), tau_prev(1), zeta(1), g]
            EnvKind::PendulumSwingup => 7,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) {
            return Err(format!("dt must be > 0, got {}", self.dt));
        }
        if self.horizon < 1 {
            return Err("horizon must be >= 1".into());
        }
        if !(self.a_limit > 0.0) {
            return Err(format!("a_limit must be > 0, got {}", self.a_limit));
        }
        if self.d_act != self.d_q() {
            return Err(format!(
                "d_act {} does not match task coordinate count {}",
                self.d_act,
                self.d_q()
            ));
        }
        match self.kind {
            EnvKind::PointMassTrack => {
                if !(self.v_cmd_range > 0.0) || !(self.h_cmd_range > 0.0) {
                    return Err("command ranges must be > 0".into());
                }
            }
            EnvKind::PendulumSwingup => {
                if !(self.h_cmd_range > PEND_H_CMD_LO && self.h_cmd_range <= 1.0) {
                    return Err(format!(
                        "pendulum h_cmd_range must be in ({PEND_H_CMD_LO}, 1], got {}",
                        self.h_cmd_range
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Full simulation state. `prev_torque` is carried so the observation can
/// expose the last applied command, mirroring torque feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub cmd: Vec<f64>,
    pub zeta: Vec<f64>,
    pub prev_torque: Vec<f64>,
    pub step_count: usize,
}

/// Draw an initial state: positions/velocities from small uniform ranges,
/// commands from the task command ranges, fatigue zeroed.
pub fn env_reset(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> EnvState {
    let d = spec.d_q();
    let (q, qdot) = match spec.kind {
        EnvKind::PointMassTrack => (
            vec![0.0, 0.0, rng.gen_range(-PM_RESET_H_RANGE..PM_RESET_H_RANGE)],
            (0..d).map(|_| rng.gen_range(-PM_RESET_V_RANGE..PM_RESET_V_RANGE)).collect(),
        ),
        EnvKind::PendulumSwingup => (
            (0..d).map(|_| rng.gen_range(-PEND_RESET_RANGE..PEND_RESET_RANGE)).collect(),
            (0..d).map(|_| rng.gen_range(-PEND_RESET_RANGE..PEND_RESET_RANGE)).collect(),
        ),
    };
    let cmd = match spec.kind {
        EnvKind::PointMassTrack => vec![
            rng.gen_range(-spec.v_cmd_range..spec.v_cmd_range),
            rng.gen_range(-spec.v_cmd_range..spec.v_cmd_range),
            rng.gen_range(-spec.h_cmd_range..spec.h_cmd_range),
        ],
        EnvKind::PendulumSwingup => vec![rng.gen_range(PEND_H_CMD_LO..spec.h_cmd_range)],
    };
    EnvState {
        q,
        qdot,
        cmd,
        zeta: vec![0.0; d],
        prev_torque: vec![0.0; d],
        step_count: 0,
    }
}

/// Generalized accelerations at `state` under `torque`.
fn accelerations(spec: &EnvSpec, state: &EnvState, torque: &[f64]) -> Vec<f64> {
    match spec.kind {
        EnvKind::PointMassTrack => torque.to_vec(), // unit mass per axis
        EnvKind::PendulumSwingup => {
            let theta = state.q[0];
            let ml2 = PEND_MASS * PEND_LENGTH * PEND_LENGTH;
            vec![(torque[0] - PEND_MASS * PEND_GRAVITY * PEND_LENGTH * theta.sin()) / ml2]
        }
    }
}

/// Fatigue accumulator update `(zeta + |tau| dt) * gamma`, elementwise.
pub fn fatigue_update(zeta: &[f64], torque: &[f64], dt: f64, gamma_f: f64) -> Vec<f64> {
    debug_assert!(gamma_f > 0.0 && gamma_f < 1.0);
    zeta.iter()
        .zip(torque)
        .map(|(&z, &t)| (z + t.abs() * dt) * gamma_f)
        .collect()
}

/// Tracking kernel, maximal at zero error, bounded in `(0, 1]`.
pub fn phi(e: f64) -> f64 {
    (-e * e / PHI_WIDTH).exp()
}

/// Per-step reward at `state` (conventionally the post-integration state)
/// under `torque`, with schedule factor `f_t` attenuating command targets
/// when the spec enables `cmd_scaling`.
pub fn reward_eval(spec: &EnvSpec, state: &EnvState, torque: &[f64], f_t: f64) -> f64 {
    let dt = spec.dt;
    let scale = if spec.cmd_scaling { f_t } else { 1.0 };
    let tracking = match spec.kind {
        EnvKind::PointMassTrack => {
            10.0 * dt * phi(state.qdot[0] - state.cmd[0] * scale)
                + 5.0 * dt * phi(state.qdot[1] - state.cmd[1] * scale)
                + 7.0 * dt * phi(state.q[2] - state.cmd[2] * scale)
        }
        EnvKind::PendulumSwingup => {
            let tip_height = (1.0 - state.q[0].cos()) / 2.0;
            10.0 * dt * phi(tip_height - state.cmd[0] * scale)
                + 5.0 * dt * phi(state.qdot[0] / 4.0)
        }
    };
    let kappa_scale = 1.0 / spec.a_limit;
    let fatigue: f64 = state
        .zeta
        .iter()
        .zip(torque)
        .map(|(&z, &t)| z * (t * kappa_scale).abs())
        .sum();
    let qddot = accelerations(spec, state, torque);
    let accel: f64 = qddot.iter().map(|a| a * a).sum();
    tracking - 0.05 * dt * fatigue - 1e-6 * dt * accel
}

/// Largest possible per-step reward magnitude for this spec, from the kernel
/// bounds, the fatigue fixed point, and the torque limit.
pub fn reward_bound(spec: &EnvSpec) -> f64 {
    let dt = spec.dt;
    let tracking_max = match spec.kind {
        EnvKind::PointMassTrack => (10.0 + 5.0 + 7.0) * dt,
        EnvKind::PendulumSwingup => (10.0 + 5.0) * dt,
    };
    let zeta_max = FATIGUE_GAMMA * spec.a_limit * dt / (1.0 - FATIGUE_GAMMA);
    let fatigue_max = 0.05 * dt * zeta_max * spec.d_q() as f64;
    let accel_max = match spec.kind {
        EnvKind::PointMassTrack => spec.a_limit * spec.a_limit * spec.d_q() as f64,
        EnvKind::PendulumSwingup => {
            let worst = (spec.a_limit + PEND_MASS * PEND_GRAVITY * PEND_LENGTH)
                / (PEND_MASS * PEND_LENGTH * PEND_LENGTH);
            worst * worst
        }
    };
    tracking_max + fatigue_max + 1e-6 * dt * accel_max
}

/// Advance one step with semi-implicit Euler; returns the successor state,
/// the reward evaluated on it, and the done flag (horizon reached or
/// divergence guard tripped).
pub fn env_step(
    spec: &EnvSpec,
    state: &EnvState,
    torque: &[f64],
    f_t: f64,
) -> Result<(EnvState, f64, bool), EnvError> {
    if torque.len() != spec.d_act {
        return Err(EnvError::DimMismatch { expected: spec.d_act, got: torque.len() });
    }
    if let Some(i) = torque.iter().position(|t| !t.is_finite()) {
        return Err(EnvError::NonFiniteInput(i));
    }
    let qddot = accelerations(spec, state, torque);
    let qdot: Vec<f64> =
        state.qdot.iter().zip(&qddot).map(|(&v, &a)| v + spec.dt * a).collect();
    let q: Vec<f64> = state.q.iter().zip(&qdot).map(|(&x, &v)| x + spec.dt * v).collect();
    let next = EnvState {
        zeta: fatigue_update(&state.zeta, torque, spec.dt, FATIGUE_GAMMA),
        prev_torque: torque.to_vec(),
        step_count: state.step_count + 1,
        cmd: state.cmd.clone(),
        q,
        qdot,
    };
    let reward = reward_eval(spec, &next, torque, f_t);
    let diverged = next
        .q
        .iter()
        .chain(&next.qdot)
        .any(|v| v.abs() > DIVERGENCE_GUARD || !v.is_finite());
    let done = diverged || next.step_count >= spec.horizon;
    Ok((next, reward, done))
}

/// Observation vector; `f_t` scales the exposed command when `cmd_scaling`
/// is enabled so the policy sees the target it is rewarded against.
pub fn observe(spec: &EnvSpec, state: &EnvState, f_t: f64) -> Vec<f64> {
    let scale = if spec.cmd_scaling { f_t } else { 1.0 };
    let mut obs = Vec::with_capacity(spec.d_obs());
    match spec.kind {
        EnvKind::PointMassTrack => {
            obs.extend_from_slice(&state.qdot);
            obs.push(state.q[2]);
        }
        EnvKind::PendulumSwingup => {
            obs.push(state.q[0].cos());
            obs.push(state.q[0].sin());
            obs.push(state.qdot[0]);
        }
    }
    obs.extend(state.cmd.iter().map(|c| c * scale));
    obs.extend(state.prev_torque.iter().map(|t| t / spec.a_limit));
    obs.extend_from_slice(&state.zeta);
    obs.push(-1.0); // gravity indicator analogue
    debug_assert_eq!(obs.len(), spec.d_obs());
    obs
}

/// Total mechanical energy of the pendulum (zero at the bottom, at rest).
pub fn pendulum_energy(state: &EnvState) -> f64 {
    let ml2 = PEND_MASS * PEND_LENGTH * PEND_LENGTH;
    0.5 * ml2 * state.qdot[0] * state.qdot[0]
        + PEND_MASS * PEND_GRAVITY * PEND_LENGTH * (1.0 - state.q[0].cos())
}

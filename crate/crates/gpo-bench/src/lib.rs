//! A desk-scale laboratory for PPO with a growing action space.
//!
//! The central object is a time-varying squashing transform
//! `a_exec = beta_t * tanh(a / beta_t)` applied between a Gaussian policy and a
//! torque-controlled environment. `beta_t = a_limit * f(t)` follows a monotone
//! growth schedule, so the executable action range starts small and expands
//! over training while the PPO update itself is untouched.
//!
//! The crate is organized as:
//!
//! - [`growth`]: growth schedules `f(t)` and the squash transform with its
//!   inverse and Jacobian.
//! - [`policy`]: Gaussian MLP policy, value network, log-densities under both
//!   the latent and the transformed action variables, and a small reverse-mode
//!   gradient engine that backs all analytic gradients.
//! - [`envs`]: deterministic toy torque environments (planar point-mass
//!   tracking, pendulum swing-up) with tracking rewards, a fatigue
//!   accumulator, and optional schedule-scaled command targets.
//! - [`trainer`]: rollout collection through the squash transform, GAE, and
//!   the clipped-surrogate PPO update.
//! - [`theory`]: numerical verification of the update-equivalence identity,
//!   the gradient-distortion bound, variance/SNR scaling laws, and the SGD
//!   convergence bounds on a local quadratic model.
//! - [`cli`]: config parsing, run orchestration, metrics/report persistence,
//!   and reproducibility plumbing.

pub mod cli;
pub mod envs;
pub mod growth;
pub mod policy;
pub mod rng;
pub mod theory;
pub mod trainer;

//! Rollout collection through the squash transform, GAE, and the clipped
//! PPO update.
//!
//! One training iteration: `beta = a_limit * f(update_idx)` is frozen for the
//! whole batch, latent actions are sampled from the Gaussian policy, squashed,
//! and executed; advantages come from GAE; the update optimizes the clipped
//! surrogate plus a value MSE term. The growth schedule is the only thing
//! that distinguishes a run from fixed-range PPO — the update rule itself is
//! identical (the change-of-variables Jacobian is theta-independent and
//! cancels from the ratio).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{env_reset, env_step, observe, EnvError, EnvSpec, EnvState};
use crate::growth::{squash, GrowthSchedule};
use crate::policy::graph::Tensor;
use crate::policy::{
    latent_log_prob, sample_latent, squash_log_jacobian, PolicyError, PolicyGraph, PolicyParams,
};
use crate::rng::{substream, StreamDomain};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite {what} at update {update}; update aborted")]
    Numerical { what: &'static str, update: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `log_sigma` receives no gradient (theory-verification runs).
    Fixed,
    /// `log_sigma` is learned like any other parameter.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which log-density enters the importance ratio. The two are equivalent up
/// to floating-point association; `Latent` is the default fast path and
/// `Transformed` exists to exercise the equivalence end to end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogProbPath {
    Latent,
    Transformed,
}

/// All PPO hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub lam: f64,
    pub lr: f64,
    pub updates: usize,
    /// Rollout length per update, steps.
    pub horizon: usize,
    pub n_envs: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub seed: u64,
    pub normalize_adv: bool,
    pub sigma_mode: SigmaMode,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
    pub logprob_path: LogProbPath,
    /// Hidden layer widths for both networks.
    pub hidden: Vec<usize>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            clip_eps: 0.2,
            gamma: 0.99,
            lam: 0.95,
            lr: 3e-4,
            updates: 3000,
            horizon: 256,
            n_envs: 16,
            epochs: 4,
            minibatches: 8,
            seed: 0,
            normalize_adv: true,
            sigma_mode: SigmaMode::Learned,
            entropy_coef: 0.0,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            optimizer: OptimizerKind::Adam,
            logprob_path: LogProbPath::Latent,
            hidden: vec![64, 64],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(format!("clip_eps must be in (0,1), got {}", self.clip_eps));
        }
        for (name, v) in [("gamma", self.gamma), ("lam", self.lam)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} must be in (0,1], got {v}"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(format!("lr must be > 0, got {}", self.lr));
        }
        if self.horizon == 0 || self.n_envs == 0 || self.epochs == 0 || self.minibatches == 0 {
            return Err("horizon, n_envs, epochs, minibatches must be >= 1".into());
        }
        if self.minibatches > self.horizon * self.n_envs {
            return Err("more minibatches than samples".into());
        }
        Ok(())
    }
}

/// One rollout's trajectories, `(t, env)` flattened as `t * n_envs + env`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub n_steps: usize,
    pub n_envs: usize,
    pub d_obs: usize,
    pub d_act: usize,
    pub obs: Vec<f64>,
    pub latent_actions: Vec<f64>,
    pub exec_actions: Vec<f64>,
    /// Latent log-probs under the collecting policy.
    pub logp_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Bootstrap values for the state after the last step, per env.
    pub last_values: Vec<f64>,
    /// The single `beta` used everywhere in this batch.
    pub beta_used: f64,
    pub f_used: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Fraction of latent components with `|a / beta| > 0.5`.
    pub frac_outside_half: f64,
    /// Returns of episodes completed inside this batch.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.n_steps * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stats from one `ppo_update`.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
}

/// One metrics-CSV row.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub update: usize,
    pub beta: f64,
    pub f: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub grad_norm: f64,
    pub frac_outside_half: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "update,beta,f,mean_return,std_return,surrogate_loss,value_loss,approx_kl,clip_frac,grad_norm,frac_outside_half";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.update,
            self.beta,
            self.f,
            self.mean_return,
            self.std_return,
            self.surrogate_loss,
            self.value_loss,
            self.approx_kl,
            self.clip_frac,
            self.grad_norm,
            self.frac_outside_half
        )
    }
}

/// `exp(logp_new - logp_old)`, clamped for numerical safety.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp().clamp(1e-8, 1e8)
}

/// Negated clipped per-sample surrogate: `-min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    -(ratio * adv).min(clipped * adv)
}

/// Fill `advantages` and `returns` by the usual backward GAE recursion:
/// `delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t`,
/// `A_t = delta_t + gamma lam (1 - done_t) A_{t+1}`, `returns = A + V`.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lam: f64) {
    let (t_n, n) = (batch.n_steps, batch.n_envs);
    batch.advantages = vec![0.0; t_n * n];
    batch.returns = vec![0.0; t_n * n];
    for e in 0..n {
        let mut gae = 0.0;
        for t in (0..t_n).rev() {
            let i = t * n + e;
            let not_done = if batch.dones[i] { 0.0 } else { 1.0 };
            let next_v = if t + 1 < t_n { batch.values[(t + 1) * n + e] } else { batch.last_values[e] };
            let delta = batch.rewards[i] + gamma * next_v * not_done - batch.values[i];
            gae = delta + gamma * lam * not_done * gae;
            batch.advantages[i] = gae;
            batch.returns[i] = gae + batch.values[i];
        }
    }
}

/// In-place per-batch advantage normalization to mean 0, std 1.
pub fn normalize_advantages(batch: &mut RolloutBatch) {
    let n = batch.advantages.len() as f64;
    let mean = batch.advantages.iter().sum::<f64>() / n;
    let var = batch.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in &mut batch.advantages {
        *a = (*a - mean) / std;
    }
}

#[derive(Clone)]
struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        OptimizerState { kind, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, flat: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in flat.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - B1.powi(self.t as i32);
                let bc2 = 1.0 - B2.powi(self.t as i32);
                for i in 0..flat.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    flat[i] -= lr * mh / (vh.sqrt() + EPS);
                }
            }
        }
    }
}

/// Synchronous PPO driver: owns the policy, the env states, and the named
/// rng substreams derived from the master seed.
#[derive(Clone)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub env_spec: EnvSpec,
    pub schedule: GrowthSchedule,
    pub policy: PolicyParams,
    env_states: Vec<EnvState>,
    env_rngs: Vec<ChaCha8Rng>,
    sample_rngs: Vec<ChaCha8Rng>,
    shuffle_rng: ChaCha8Rng,
    opt: OptimizerState,
    episode_acc: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, env_spec: EnvSpec, schedule: GrowthSchedule) -> Self {
        let policy = PolicyParams::init(env_spec.d_obs(), env_spec.d_act, &cfg.hidden, cfg.seed);
        let mut env_rngs: Vec<ChaCha8Rng> = (0..cfg.n_envs)
            .map(|e| substream(cfg.seed, StreamDomain::Env, e as u64))
            .collect();
        let env_states = env_rngs.iter_mut().map(|rng| env_reset(&env_spec, rng)).collect();
        let sample_rngs = (0..cfg.n_envs)
            .map(|e| substream(cfg.seed, StreamDomain::Sampling, e as u64))
            .collect();
        let shuffle_rng = substream(cfg.seed, StreamDomain::Shuffle, 0);
        let n_params = policy.n_params();
        let opt = OptimizerState::new(cfg.optimizer, n_params);
        let episode_acc = vec![0.0; cfg.n_envs];
        Trainer { cfg, env_spec, schedule, policy, env_states, env_rngs, sample_rngs, shuffle_rng, opt, episode_acc }
    }

    /// Collect one batch under the frozen `beta = a_limit * f(update_idx)`.
    pub fn collect_rollout(&mut self, update_idx: usize) -> Result<RolloutBatch, TrainError> {
        let f = self.schedule.value(update_idx as f64);
        let beta = self.schedule.beta(update_idx as f64);
        let (t_n, n) = (self.cfg.horizon, self.cfg.n_envs);
        let (d_obs, d_act) = (self.env_spec.d_obs(), self.env_spec.d_act);
        let sigma = self.policy.sigma();

        let mut batch = RolloutBatch {
            n_steps: t_n,
            n_envs: n,
            d_obs,
            d_act,
            obs: Vec::with_capacity(t_n * n * d_obs),
            latent_actions: Vec::with_capacity(t_n * n * d_act),
            exec_actions: Vec::with_capacity(t_n * n * d_act),
            logp_old: Vec::with_capacity(t_n * n),
            rewards: Vec::with_capacity(t_n * n),
            values: Vec::with_capacity(t_n * n),
            dones: Vec::with_capacity(t_n * n),
            last_values: Vec::with_capacity(n),
            beta_used: beta,
            f_used: f,
            advantages: Vec::new(),
            returns: Vec::new(),
            frac_outside_half: 0.0,
            episode_returns: Vec::new(),
        };

        let mut outside = 0usize;
        for _t in 0..t_n {
            // batched forward over envs on one immutable policy snapshot
            let mut obs_step = Vec::with_capacity(n * d_obs);
            for state in &self.env_states {
                obs_step.extend(observe(&self.env_spec, state, f));
            }
            let obs_t = Tensor::from_vec(n, d_obs, obs_step);
            let mu = self.policy.mean_net.forward_batch(&obs_t);
            let val = self.policy.value_net.forward_batch(&obs_t);
            if !mu.is_finite() || !val.is_finite() {
                return Err(TrainError::Numerical { what: "policy output", update: update_idx });
            }

            for e in 0..n {
                let mu_e = mu.row(e);
                let a = sample_latent(mu_e, &sigma, &mut self.sample_rngs[e]);
                let a_exec: Vec<f64> = a.iter().map(|&x| squash(x, beta)).collect();
                outside += a.iter().filter(|&&x| (x / beta).abs() > 0.5).count();
                let logp = latent_log_prob(mu_e, &sigma, &a);
                let (next, reward, done) =
                    env_step(&self.env_spec, &self.env_states[e], &a_exec, f)?;

                batch.obs.extend_from_slice(obs_t.row(e));
                batch.latent_actions.extend_from_slice(&a);
                batch.exec_actions.extend_from_slice(&a_exec);
                batch.logp_old.push(logp);
                batch.rewards.push(reward);
                batch.values.push(val.row(e)[0]);
                batch.dones.push(done);

                self.episode_acc[e] += reward;
                if done {
                    batch.episode_returns.push(self.episode_acc[e]);
                    self.episode_acc[e] = 0.0;
                    self.env_states[e] = env_reset(&self.env_spec, &mut self.env_rngs[e]);
                } else {
                    self.env_states[e] = next;
                }
            }
        }

        // bootstrap values for the states after the last step
        let mut obs_last = Vec::with_capacity(n * d_obs);
        for state in &self.env_states {
            obs_last.extend(observe(&self.env_spec, state, f));
        }
        let val = self.policy.value_net.forward_batch(&Tensor::from_vec(n, d_obs, obs_last));
        batch.last_values = (0..n).map(|e| val.row(e)[0]).collect();
        batch.frac_outside_half = outside as f64 / (t_n * n * d_act) as f64;
        Ok(batch)
    }

    /// Run `epochs` passes of shuffled minibatch steps on the clipped
    /// surrogate + value MSE (- entropy bonus), with gradient-norm clipping
    /// and a post-step sigma clamp.
    pub fn ppo_update(&mut self, batch: &RolloutBatch, update_idx: usize) -> Result<UpdateStats, TrainError> {
        let total = batch.len();
        let mb_size = total / self.cfg.minibatches;
        let mut indices: Vec<usize> = (0..total).collect();

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64); // surr, vloss, kl, clip, gnorm
        let mut n_minibatches = 0usize;

        for _epoch in 0..self.cfg.epochs {
            indices.shuffle(&mut self.shuffle_rng);
            for mb in 0..self.cfg.minibatches {
                let lo = mb * mb_size;
                let hi = if mb + 1 == self.cfg.minibatches { total } else { lo + mb_size };
                let idx = &indices[lo..hi];
                let b = idx.len();

                let mut obs = Vec::with_capacity(b * batch.d_obs);
                let mut acts = Vec::with_capacity(b * batch.d_act);
                let mut logp_old = Vec::with_capacity(b);
                let mut adv = Vec::with_capacity(b);
                let mut rets = Vec::with_capacity(b);
                for &i in idx {
                    obs.extend_from_slice(&batch.obs[i * batch.d_obs..(i + 1) * batch.d_obs]);
                    acts.extend_from_slice(
                        &batch.latent_actions[i * batch.d_act..(i + 1) * batch.d_act],
                    );
                    adv.push(batch.advantages[i]);
                    rets.push(batch.returns[i]);
                    logp_old.push(batch.logp_old[i]);
                }

                // Optionally route both log-probs through the transformed
                // density; the theta-independent Jacobian addend appears on
                // both sides of the ratio and cancels.
                let jac: Option<Vec<f64>> = match self.cfg.logprob_path {
                    LogProbPath::Latent => None,
                    LogProbPath::Transformed => {
                        let mut v = Vec::with_capacity(b);
                        for &i in idx {
                            let ae = &batch.exec_actions[i * batch.d_act..(i + 1) * batch.d_act];
                            v.push(
                                squash_log_jacobian(ae, batch.beta_used)
                                    .map_err(PolicyError::from)?,
                            );
                        }
                        Some(v)
                    }
                };
                if let Some(j) = &jac {
                    for (lp, jj) in logp_old.iter_mut().zip(j) {
                        *lp += jj;
                    }
                }

                let mut pg = PolicyGraph::new(&self.policy, Tensor::from_vec(b, batch.d_obs, obs));
                let mut logp_new = pg.latent_log_prob(Tensor::from_vec(b, batch.d_act, acts));
                if let Some(j) = &jac {
                    let jl = pg.graph.leaf(Tensor::from_vec(b, 1, j.clone()));
                    logp_new = pg.graph.add(logp_new, jl);
                }
                let old_leaf = pg.graph.leaf(Tensor::from_vec(b, 1, logp_old));
                let dlp = pg.graph.sub(logp_new, old_leaf);
                let ratio = pg.graph.exp_clamp(dlp, 1e-8, 1e8);
                let adv_leaf = pg.graph.leaf(Tensor::from_vec(b, 1, adv));
                let surr_vec = pg.graph.clipped_surrogate(ratio, adv_leaf, self.cfg.clip_eps);
                let surr = pg.graph.mean_all(surr_vec);
                let ret_leaf = pg.graph.leaf(Tensor::from_vec(b, 1, rets));
                let verr = pg.graph.sub(pg.value(), ret_leaf);
                let vsq = pg.graph.square(verr);
                let vmse = pg.graph.mean_all(vsq);
                let vloss = pg.graph.scale(vmse, self.cfg.value_coef);
                let mut loss = pg.graph.add(surr, vloss);
                if self.cfg.entropy_coef != 0.0 {
                    let ent = pg.graph.gauss_entropy(pg.log_sigma());
                    let ent = pg.graph.scale(ent, -self.cfg.entropy_coef);
                    loss = pg.graph.add(loss, ent);
                }

                let loss_val = pg.graph.scalar(loss);
                if !loss_val.is_finite() {
                    return Err(TrainError::Numerical { what: "loss", update: update_idx });
                }

                // diagnostics from the forward values
                let ratio_vals = pg.graph.value(ratio).data.clone();
                let kl: f64 = ratio_vals.iter().map(|&r| (r - 1.0) - r.ln()).sum::<f64>() / b as f64;
                let clip_frac = ratio_vals
                    .iter()
                    .filter(|&&r| (r - 1.0).abs() > self.cfg.clip_eps)
                    .count() as f64
                    / b as f64;

                pg.graph.backward(loss);
                let grad_gathered = pg.gather_grad();
                let surr_val = pg.graph.scalar(surr);
                let vmse_val = pg.graph.scalar(vmse);
                drop(pg);
                let mut grad = grad_gathered;
                if !grad.is_finite() {
                    return Err(TrainError::Numerical { what: "gradient", update: update_idx });
                }
                if self.cfg.sigma_mode == SigmaMode::Fixed {
                    let n_p = grad.flat.len();
                    for g in &mut grad.flat[n_p - batch.d_act..] {
                        *g = 0.0;
                    }
                }
                let gnorm = grad.norm();
                if gnorm > self.cfg.max_grad_norm {
                    let s = self.cfg.max_grad_norm / gnorm;
                    for g in &mut grad.flat {
                        *g *= s;
                    }
                }

                let mut flat = self.policy.flatten();
                self.opt.step(&mut flat, &grad.flat, self.cfg.lr);
                self.policy.set_from_flat(&flat);
                self.policy.clamp_sigma();

                sums.0 += surr_val;
                sums.1 += vmse_val;
                sums.2 += kl;
                sums.3 += clip_frac;
                sums.4 += gnorm;
                n_minibatches += 1;
            }
        }

        let n = n_minibatches as f64;
        Ok(UpdateStats {
            surrogate_loss: sums.0 / n,
            value_loss: sums.1 / n,
            approx_kl: sums.2 / n,
            clip_frac: sums.3 / n,
            grad_norm: sums.4 / n,
        })
    }

    /// One full iteration: collect, GAE, (optional) advantage normalization,
    /// update; returns the metrics row.
    pub fn train_step(&mut self, update_idx: usize) -> Result<MetricsRow, TrainError> {
        let mut batch = self.collect_rollout(update_idx)?;
        compute_gae(&mut batch, self.cfg.gamma, self.cfg.lam);
        if self.cfg.normalize_adv {
            normalize_advantages(&mut batch);
        }
        let stats = self.ppo_update(&batch, update_idx)?;
        let (mean_return, std_return) = mean_std(&batch.episode_returns);
        Ok(MetricsRow {
            update: update_idx,
            beta: batch.beta_used,
            f: batch.f_used,
            mean_return,
            std_return,
            surrogate_loss: stats.surrogate_loss,
            value_loss: stats.value_loss,
            approx_kl: stats.approx_kl,
            clip_frac: stats.clip_frac,
            grad_norm: stats.grad_norm,
            frac_outside_half: batch.frac_outside_half,
        })
    }

    /// The full run. `on_row` sees each metrics row as it is produced, so
    /// partial artifacts survive an abort.
    pub fn train_loop(
        &mut self,
        mut on_row: impl FnMut(&MetricsRow),
    ) -> Result<Vec<MetricsRow>, TrainError> {
        let mut rows = Vec::with_capacity(self.cfg.updates);
        for u in 0..self.cfg.updates {
            let row = self.train_step(u)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests;

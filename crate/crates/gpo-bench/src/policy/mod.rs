//! Gaussian MLP policy, value network, and log-densities in both action
//! variables.
//!
//! The policy is `a ~ N(mu_theta(s), diag(sigma^2))` with a state-independent
//! learned `log_sigma`. Executed actions are `a_exec = squash(a, beta)`; the
//! change of variables adds `-sum_i ln(1 - (a_exec_i/beta)^2)` to the latent
//! log density, a term that does not depend on `theta`. All analytic
//! gradients run through the reverse-mode engine in [`graph`].
//!
//! # Parameter flattening
//!
//! [`PolicyParams::flatten`] and [`GradientVector`] index parameters in one
//! canonical order: mean-net layers first (for each layer the weight matrix
//! row-major `[fan_in x fan_out]`, then the bias), then the value-net layers
//! the same way, then `log_sigma`. The order is stable across runs and is the
//! on-disk checkpoint layout.

pub mod graph;

use graph::{Graph, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

use crate::growth::{unsquash, SaturationError};
use crate::rng::{substream, StreamDomain};

/// Post-update clamp on `sigma = exp(log_sigma)`.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

/// Initial per-dimension log standard deviation (`sigma ~= 0.78`).
pub const LOG_SIGMA_INIT: f64 = -0.25;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Saturation(#[from] SaturationError),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch { context: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    Numerical { context: &'static str },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// One affine layer, weights row-major `[fan_in x fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Feed-forward net with tanh hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Affine>,
}

impl Mlp {
    /// Orthogonal-style init: hidden layers gain 1.0, output layer gain
    /// `out_gain`, biases zero.
    fn init(d_in: usize, hidden: &[usize], d_out: usize, out_gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_out);
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|i| {
                let gain = if i + 1 == n_layers { out_gain } else { 1.0 };
                Affine {
                    fan_in: dims[i],
                    fan_out: dims[i + 1],
                    w: orthogonal(dims[i], dims[i + 1], gain, rng),
                    b: vec![0.0; dims[i + 1]],
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Batched forward pass without the tape (rollout fast path).
    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.cols, self.d_in(), "input width mismatch");
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Tensor::zeros(cur.rows, layer.fan_out);
            for r in 0..cur.rows {
                out.data[r * layer.fan_out..(r + 1) * layer.fan_out].copy_from_slice(&layer.b);
            }
            graph::matmul_acc(&cur.data, &layer.w, &mut out.data, cur.rows, layer.fan_in, layer.fan_out);
            if i + 1 < self.layers.len() {
                for v in &mut out.data {
                    *v = v.tanh();
                }
            }
            cur = out;
        }
        cur
    }

    /// Build this net on a tape; returns (parameter leaf ids, output node).
    fn build(&self, g: &mut Graph, input: NodeId) -> (Vec<(NodeId, NodeId)>, NodeId) {
        let mut param_ids = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.leaf(Tensor::from_vec(layer.fan_in, layer.fan_out, layer.w.clone()));
            let b = g.leaf(Tensor::from_vec(1, layer.fan_out, layer.b.clone()));
            param_ids.push((w, b));
            let z = g.matmul(cur, w);
            cur = g.add_row(z, b);
            if i + 1 < self.layers.len() {
                cur = g.tanh(cur);
            }
        }
        (param_ids, cur)
    }

    fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Weights of the Gaussian policy (mean net + per-dimension `log_sigma`) and
/// the value network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub d_obs: usize,
    pub d_act: usize,
    pub hidden: Vec<usize>,
    pub mean_net: Mlp,
    pub value_net: Mlp,
    pub log_sigma: Vec<f64>,
}

/// Flat gradient (or parameter delta) in the canonical flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub flat: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        GradientVector { flat: vec![0.0; n] }
    }

    pub fn norm(&self) -> f64 {
        self.flat.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat.iter().all(|v| v.is_finite())
    }
}

impl PolicyParams {
    /// Seed-controlled initialization. `seed` is the run's master seed; the
    /// policy-init substream is independent of env/sampling streams.
    pub fn init(d_obs: usize, d_act: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = substream(seed, StreamDomain::PolicyInit, 0);
        PolicyParams {
            d_obs,
            d_act,
            hidden: hidden.to_vec(),
            mean_net: Mlp::init(d_obs, hidden, d_act, 0.01, &mut rng),
            value_net: Mlp::init(d_obs, hidden, 1, 0.01, &mut rng),
            log_sigma: vec![LOG_SIGMA_INIT; d_act],
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|ls| ls.exp()).collect()
    }

    /// Clamp `sigma` into `[SIGMA_MIN, SIGMA_MAX]`; call after every update.
    pub fn clamp_sigma(&mut self) {
        for ls in &mut self.log_sigma {
            *ls = ls.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln());
        }
    }

    pub fn n_params(&self) -> usize {
        self.mean_net.param_count() + self.value_net.param_count() + self.log_sigma.len()
    }

    /// Canonical flattening: mean net (per layer: w row-major, then b), then
    /// value net the same way, then `log_sigma`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for net in [&self.mean_net, &self.value_net] {
            for layer in &net.layers {
                flat.extend_from_slice(&layer.w);
                flat.extend_from_slice(&layer.b);
            }
        }
        flat.extend_from_slice(&self.log_sigma);
        flat
    }

    /// Inverse of [`flatten`]; shapes must already match.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat length mismatch");
        let mut off = 0;
        for net in [&mut self.mean_net, &mut self.value_net] {
            for layer in &mut net.layers {
                let (wn, bn) = (layer.w.len(), layer.b.len());
                layer.w.copy_from_slice(&flat[off..off + wn]);
                off += wn;
                layer.b.copy_from_slice(&flat[off..off + bn]);
                off += bn;
            }
        }
        self.log_sigma.copy_from_slice(&flat[off..]);
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Orthogonal-style init: Gaussian matrix, Gram-Schmidt along the smaller
/// dimension, scaled by `gain`. Row-major `[rows x cols]`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n_vecs, dim, transpose) = if rows >= cols { (cols, rows, false) } else { (rows, cols, true) };
    // vectors stored as rows of an n_vecs x dim matrix
    let mut v: Vec<Vec<f64>> = (0..n_vecs)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..n_vecs {
        for j in 0..i {
            let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                v[i][k] -= dot * v[j][k];
            }
        }
        let norm: f64 = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        // a fresh Gaussian matrix is full rank with probability one
        let inv = 1.0 / norm;
        for a in &mut v[i] {
            *a *= inv;
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if transpose { v[r][c] } else { v[c][r] };
        }
    }
    w
}

/// Deterministic mean action `mu_theta(s)`.
pub fn forward_mean(params: &PolicyParams, s: &[f64]) -> Result<Vec<f64>, PolicyError> {
    if s.len() != params.d_obs {
        return Err(PolicyError::DimMismatch {
            context: "forward_mean",
            expected: params.d_obs,
            got: s.len(),
        });
    }
    let out = params.mean_net.forward_batch(&Tensor::from_vec(1, s.len(), s.to_vec()));
    Ok(out.data)
}

/// State value `V(s)`.
pub fn forward_value(params: &PolicyParams, s: &[f64]) -> Result<f64, PolicyError> {
    if s.len() != params.d_obs {
        return Err(PolicyError::DimMismatch {
            context: "forward_value",
            expected: params.d_obs,
            got: s.len(),
        });
    }
    let out = params.value_net.forward_batch(&Tensor::from_vec(1, s.len(), s.to_vec()));
    Ok(out.data[0])
}

/// Draw `a = mu + sigma .* z`, `z ~ N(0, I)` from the given stream.
pub fn sample_latent(mu: &[f64], sigma: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert_eq!(mu.len(), sigma.len());
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Diagonal-Gaussian log density of the latent action.
pub fn latent_log_prob(mu: &[f64], sigma: &[f64], a: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), sigma.len());
    debug_assert_eq!(mu.len(), a.len());
    mu.iter()
        .zip(sigma)
        .zip(a)
        .map(|((&m, &s), &x)| {
            let z = (x - m) / s;
            -s.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z
        })
        .sum()
}

/// The theta-independent change-of-variables addend:
/// `-sum_i ln(1 - (a_exec_i / beta)^2)`.
pub fn squash_log_jacobian(a_exec: &[f64], beta: f64) -> Result<f64, SaturationError> {
    let mut acc = 0.0;
    for &x in a_exec {
        let u = x / beta;
        if u.abs() >= 1.0 - crate::growth::EPS_CLAMP {
            return Err(SaturationError { ratio: u.abs(), limit: 1.0 - crate::growth::EPS_CLAMP });
        }
        acc -= (1.0 - u * u).ln();
    }
    Ok(acc)
}

/// Log density of the executed action `a_exec = squash(a, beta)`:
/// the latent density at `unsquash(a_exec)` plus the Jacobian addend.
pub fn transformed_log_prob(
    mu: &[f64],
    sigma: &[f64],
    beta: f64,
    a_exec: &[f64],
) -> Result<f64, SaturationError> {
    let mut latent = Vec::with_capacity(a_exec.len());
    for &x in a_exec {
        latent.push(unsquash(x, beta)?);
    }
    Ok(latent_log_prob(mu, sigma, &latent) + squash_log_jacobian(a_exec, beta)?)
}

/// Handle to a policy embedded on a tape: parameter leaves plus builders for
/// the loss expressions the trainer composes.
pub struct PolicyGraph<'p> {
    pub graph: Graph,
    params: &'p PolicyParams,
    mean_ids: Vec<(NodeId, NodeId)>,
    value_ids: Vec<(NodeId, NodeId)>,
    log_sigma_id: NodeId,
    obs_id: NodeId,
    mean_out: NodeId,
    value_out: NodeId,
}

impl<'p> PolicyGraph<'p> {
    /// Embed `params` and run both nets forward on an observation batch.
    pub fn new(params: &'p PolicyParams, obs: Tensor) -> Self {
        assert_eq!(obs.cols, params.d_obs, "observation width mismatch");
        let mut graph = Graph::new();
        let obs_id = graph.leaf(obs);
        let (mean_ids, mean_out) = params.mean_net.build(&mut graph, obs_id);
        let (value_ids, value_out) = params.value_net.build(&mut graph, obs_id);
        let log_sigma_id =
            graph.leaf(Tensor::from_vec(1, params.d_act, params.log_sigma.clone()));
        PolicyGraph { graph, params, mean_ids, value_ids, log_sigma_id, obs_id, mean_out, value_out }
    }

    pub fn obs(&self) -> NodeId {
        self.obs_id
    }

    /// Batched `mu_theta(s)` node.
    pub fn mean(&self) -> NodeId {
        self.mean_out
    }

    /// Batched `V(s)` node (`B x 1`).
    pub fn value(&self) -> NodeId {
        self.value_out
    }

    pub fn log_sigma(&self) -> NodeId {
        self.log_sigma_id
    }

    /// Per-row latent log prob of an action batch under the current net.
    pub fn latent_log_prob(&mut self, actions: Tensor) -> NodeId {
        let a = self.graph.leaf(actions);
        self.graph.gauss_log_prob(self.mean_out, self.log_sigma_id, a)
    }

    /// Gather leaf adjoints into the canonical flat order. Call after
    /// `self.graph.backward(loss)`.
    pub fn gather_grad(&self) -> GradientVector {
        let mut flat = Vec::with_capacity(self.params.n_params());
        for ids in [&self.mean_ids, &self.value_ids] {
            for &(w, b) in ids.iter() {
                flat.extend_from_slice(&self.graph.grad(w).data);
                flat.extend_from_slice(&self.graph.grad(b).data);
            }
        }
        flat.extend_from_slice(&self.graph.grad(self.log_sigma_id).data);
        GradientVector { flat }
    }
}

/// Gradient of the transformed log density w.r.t. all parameters, by
/// reverse-mode accumulation. The Jacobian addend is theta-independent and
/// contributes nothing; the mean path equals
/// `((unsquash(a_exec) - mu) / sigma^2)^T dmu/dtheta`.
pub fn score_gradient(
    params: &PolicyParams,
    s: &[f64],
    a_exec: &[f64],
    beta: f64,
) -> Result<GradientVector, PolicyError> {
    if s.len() != params.d_obs {
        return Err(PolicyError::DimMismatch {
            context: "score_gradient",
            expected: params.d_obs,
            got: s.len(),
        });
    }
    let mut latent = Vec::with_capacity(a_exec.len());
    for &x in a_exec {
        latent.push(unsquash(x, beta)?);
    }
    let mut pg = PolicyGraph::new(params, Tensor::from_vec(1, s.len(), s.to_vec()));
    let lp = pg.latent_log_prob(Tensor::from_vec(1, latent.len(), latent));
    let loss = pg.graph.sum_all(lp);
    pg.graph.backward(loss);
    Ok(pg.gather_grad())
}

/// Reverse-mode gradient of a composed scalar loss. The closure builds the
/// loss node from the embedded policy; the returned gradient follows the
/// canonical flattening.
pub fn backprop_loss<F>(
    params: &PolicyParams,
    obs: Tensor,
    build: F,
) -> Result<(f64, GradientVector), PolicyError>
where
    F: FnOnce(&mut PolicyGraph) -> NodeId,
{
    let mut pg = PolicyGraph::new(params, obs);
    let loss = build(&mut pg);
    let value = pg.graph.scalar(loss);
    if !value.is_finite() {
        return Err(PolicyError::Numerical { context: "backprop_loss" });
    }
    pg.graph.backward(loss);
    let grad = pg.gather_grad();
    if !grad.is_finite() {
        return Err(PolicyError::Numerical { context: "backprop_loss gradient" });
    }
    Ok((value, grad))
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    seed: u64,
    update_idx: u64,
    d_obs: usize,
    d_act: usize,
    hidden: Vec<usize>,
    flat: Vec<f64>,
}

const CHECKPOINT_SCHEMA: &str = "gpo-bench/checkpoint/1";

/// Serialize as a flat array with a JSON header. `f64` values survive the
/// JSON round trip bit-exactly.
pub fn save_checkpoint(
    params: &PolicyParams,
    seed: u64,
    update_idx: u64,
    path: &Path,
) -> Result<(), PolicyError> {
    let ck = Checkpoint {
        schema: CHECKPOINT_SCHEMA.to_string(),
        seed,
        update_idx,
        d_obs: params.d_obs,
        d_act: params.d_act,
        hidden: params.hidden.clone(),
        flat: params.flatten(),
    };
    let body = serde_json::to_string(&ck).map_err(|e| PolicyError::Format(e.to_string()))?;
    std::fs::write(path, body)?;
    Ok(())
}

/// Reload a checkpoint; returns `(params, seed, update_idx)`.
pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, u64, u64), PolicyError> {
    let body = std::fs::read_to_string(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&body).map_err(|e| PolicyError::Format(e.to_string()))?;
    if ck.schema != CHECKPOINT_SCHEMA {
        return Err(PolicyError::Format(format!("unknown schema {}", ck.schema)));
    }
    let mut params = PolicyParams::init(ck.d_obs, ck.d_act, &ck.hidden, ck.seed);
    if ck.flat.len() != params.n_params() {
        return Err(PolicyError::Format(format!(
            "flat length {} does not match shape metadata ({} expected)",
            ck.flat.len(),
            params.n_params()
        )));
    }
    params.set_from_flat(&ck.flat);
    Ok((params, ck.seed, ck.update_idx))
}

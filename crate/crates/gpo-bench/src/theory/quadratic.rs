//! Local quadratic return model `J(theta) = J* - 1/2 (theta - theta*)^T H (theta - theta*)`
//! with `mu I <= H <= L I`, plus the SGD-style noisy ascent recursion used by
//! the convergence and steady-state checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::TheoryError;

/// Cyclic Jacobi eigenvalues of a symmetric matrix (row-major `n x n`).
/// Intended for the small curvature matrices used here (`n <= 16`).
pub fn sym_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let frob: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-14 * frob.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Local curvature model. `mu`, `l`, and the contraction factor
/// `rho = ||I - eta H||_2^2` are derived from the spectrum at construction.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    pub dim: usize,
    /// Symmetric positive-definite curvature, row-major.
    pub h: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub j_star: f64,
    /// Noise coefficient: `E ||xi_t||^2 = c beta_t^2`.
    pub c: f64,
    /// Step size.
    pub eta: f64,
    pub mu: f64,
    pub l: f64,
    pub rho: f64,
}

impl QuadraticModel {
    pub fn new(
        h: Vec<f64>,
        theta_star: Vec<f64>,
        j_star: f64,
        c: f64,
        eta: f64,
    ) -> Result<Self, TheoryError> {
        let dim = theta_star.len();
        if h.len() != dim * dim {
            return Err(TheoryError::Precondition("H shape does not match theta_star".into()));
        }
        for i in 0..dim {
            for j in 0..i {
                if (h[i * dim + j] - h[j * dim + i]).abs() > 1e-9 {
                    return Err(TheoryError::Precondition("H is not symmetric".into()));
                }
            }
        }
        let eig = sym_eigenvalues(&h, dim);
        let mu = eig[0];
        let l = eig[dim - 1];
        if mu <= 0.0 {
            return Err(TheoryError::Precondition(format!(
                "H is not positive definite (lambda_min = {mu})"
            )));
        }
        if !(eta > 0.0) {
            return Err(TheoryError::Precondition(format!("eta must be > 0, got {eta}")));
        }
        let rho = eig.iter().map(|&lam| (1.0 - eta * lam).abs()).fold(0.0f64, f64::max).powi(2);
        if rho >= 1.0 {
            return Err(TheoryError::Precondition(format!(
                "contraction factor rho = {rho} is not < 1 (eta too large)"
            )));
        }
        Ok(QuadraticModel { dim, h, theta_star, j_star, c, eta, mu, l, rho })
    }

    /// Random instance: `H = Q diag(lambda) Q^T` with eigenvalues evenly
    /// spaced in `[eig_lo, eig_hi]` and a seeded random orthogonal `Q`.
    pub fn random(
        dim: usize,
        eig_lo: f64,
        eig_hi: f64,
        c: f64,
        eta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, TheoryError> {
        let q = random_orthogonal(dim, rng);
        let lambda: Vec<f64> = (0..dim)
            .map(|i| {
                if dim == 1 {
                    eig_lo
                } else {
                    eig_lo + (eig_hi - eig_lo) * i as f64 / (dim - 1) as f64
                }
            })
            .collect();
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = 0.0;
                for k in 0..dim {
                    acc += q[i * dim + k] * lambda[k] * q[j * dim + k];
                }
                h[i * dim + j] = acc;
            }
        }
        // symmetrize away rounding
        for i in 0..dim {
            for j in 0..i {
                let v = 0.5 * (h[i * dim + j] + h[j * dim + i]);
                h[i * dim + j] = v;
                h[j * dim + i] = v;
            }
        }
        QuadraticModel::new(h, vec![0.0; dim], 0.0, c, eta)
    }

    /// Largest step size admitted by the bound preconditions: `mu / L^2`.
    pub fn eta_max(&self) -> f64 {
        self.mu / (self.l * self.l)
    }

    pub fn return_at(&self, theta: &[f64]) -> f64 {
        let e: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(t, s)| t - s).collect();
        self.j_star - 0.5 * quad_form(&self.h, &e)
    }

    /// `grad J(theta) = -H (theta - theta*)`.
    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = theta.iter().zip(&self.theta_star).map(|(t, s)| t - s).collect();
        let mut g = vec![0.0; self.dim];
        for i in 0..self.dim {
            let mut acc = 0.0;
            for j in 0..self.dim {
                acc += self.h[i * self.dim + j] * e[j];
            }
            g[i] = -acc;
        }
        g
    }
}

pub fn quad_form(h: &[f64], e: &[f64]) -> f64 {
    let n = e.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += e[i] * h[i * n + j] * e[j];
        }
    }
    acc
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Gram-Schmidt on Gaussian columns; full rank with probability one.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            for k in 0..n {
                cols[i][k] -= dot * cols[j][k];
            }
        }
        let norm: f64 = cols[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut q = vec![0.0; n * n];
    for (ci, col) in cols.iter().enumerate() {
        for (ri, &v) in col.iter().enumerate() {
            q[ri * n + ci] = v;
        }
    }
    q
}

/// One trajectory's error statistics at each step.
#[derive(Debug, Clone, Copy)]
pub struct PathPoint {
    /// `||theta_t - theta*||^2`
    pub sq_err: f64,
    /// `(theta_t - theta*)^T H (theta_t - theta*)` (twice the return gap)
    pub quad: f64,
}

/// One noisy-ascent trajectory `theta_{t+1} = theta_t + eta (grad J + xi_t)`
/// with isotropic Gaussian noise of exact second moment `c beta_t^2`;
/// records error statistics for `t = 0..=steps`.
///
/// Two protocols run under identical noise realizations when handed rngs
/// recreated from the same substream: both consume exactly `dim` standard
/// normals per step.
pub fn simulate_mse_path(
    model: &QuadraticModel,
    beta_at: &dyn Fn(usize) -> f64,
    e0: &[f64],
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<PathPoint> {
    let d = model.dim;
    let mut e: Vec<f64> = e0.to_vec();
    let mut path = Vec::with_capacity(steps + 1);
    let point = |e: &[f64]| PathPoint {
        sq_err: e.iter().map(|v| v * v).sum(),
        quad: quad_form(&model.h, e),
    };
    path.push(point(&e));
    let mut he = vec![0.0; d];
    for t in 0..steps {
        let beta = beta_at(t);
        // per-dimension std so that E||xi||^2 = c beta^2 exactly
        let std = (model.c / d as f64).sqrt() * beta;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += model.h[i * d + j] * e[j];
            }
            he[i] = acc;
        }
        for i in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            e[i] += model.eta * (-he[i] + std * z);
        }
        path.push(point(&e));
    }
    path
}

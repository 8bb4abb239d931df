//! Minimal reverse-mode gradient engine.
//!
//! A [`Graph`] is a tape of tensor-valued nodes. Forward values are computed
//! eagerly as nodes are pushed; [`Graph::backward`] seeds the loss node with
//! 1 and sweeps the tape in reverse, accumulating adjoints. The op set is
//! deliberately small: exactly the operations the policy, value, and PPO loss
//! compositions need. This is not a general autodiff library.
//!
//! Tensors are dense row-major `f64` matrices. Batches sit in rows.

use std::f64::consts::PI;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x (B×n) · w (n×m) -> B×m`
    MatMul { x: NodeId, w: NodeId },
    /// `x (B×m) + b (1×m)` broadcast over rows
    AddRow { x: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Square { x: NodeId },
    Scale { x: NodeId, c: f64 },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// `clamp(exp(x), lo, hi)` elementwise; zero gradient where clamped
    ExpClamp { x: NodeId, lo: f64, hi: f64 },
    /// Diagonal-Gaussian log density of `actions` under `(mu, exp(log_sigma))`,
    /// one scalar per row: `sum_i [-log s_i - 0.5 ln(2 pi) - (a_i-mu_i)^2 / (2 s_i^2)]`
    GaussLogProb { mu: NodeId, log_sigma: NodeId, actions: NodeId },
    /// Per-row negated clipped surrogate `-min(r A, clip(r, 1-eps, 1+eps) A)`
    ClippedSurrogate { ratio: NodeId, adv: NodeId, eps: f64 },
    /// Diagonal-Gaussian entropy `sum_i [log s_i + 0.5 ln(2 pi e)]` (scalar)
    GaussEntropy { log_sigma: NodeId },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!((t.rows, t.cols), (1, 1), "node is not a scalar");
        t.data[0]
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        assert_ne!(x, w, "matmul operands must be distinct nodes");
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(xv.cols, wv.rows, "matmul shape mismatch");
        let (b, n, m) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(b, m);
        matmul_acc(&xv.data, &wv.data, &mut out.data, b, n, m);
        self.push(out, Op::MatMul { x, w })
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.rows, 1);
        assert_eq!(xv.cols, bv.cols);
        let mut out = xv.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += bv.data[c];
            }
        }
        self.push(out, Op::AddRow { x, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_ne!(a, b, "use square for self-multiplication");
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "elementwise shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows, av.cols, data)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.data {
            *v *= *v;
        }
        self.push(out, Op::Square { x })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.data {
            *v *= c;
        }
        self.push(out, Op::Scale { x, c })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll { x })
    }

    pub fn exp_clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in &mut out.data {
            *v = v.exp().clamp(lo, hi);
        }
        self.push(out, Op::ExpClamp { x, lo, hi })
    }

    pub fn gauss_log_prob(&mut self, mu: NodeId, log_sigma: NodeId, actions: NodeId) -> NodeId {
        let (mv, sv, av) =
            (&self.nodes[mu.0].value, &self.nodes[log_sigma.0].value, &self.nodes[actions.0].value);
        assert_eq!((mv.rows, mv.cols), (av.rows, av.cols));
        assert_eq!((sv.rows, sv.cols), (1, mv.cols));
        let mut out = Tensor::zeros(mv.rows, 1);
        for r in 0..mv.rows {
            let mut lp = 0.0;
            for c in 0..mv.cols {
                let ls = sv.data[c];
                let sigma = ls.exp();
                let z = (av.data[r * mv.cols + c] - mv.data[r * mv.cols + c]) / sigma;
                lp += -ls - 0.5 * (2.0 * PI).ln() - 0.5 * z * z;
            }
            out.data[r] = lp;
        }
        self.push(out, Op::GaussLogProb { mu, log_sigma, actions })
    }

    pub fn clipped_surrogate(&mut self, ratio: NodeId, adv: NodeId, eps: f64) -> NodeId {
        let (rv, av) = (&self.nodes[ratio.0].value, &self.nodes[adv.0].value);
        assert_eq!((rv.rows, rv.cols), (av.rows, av.cols));
        assert_eq!(rv.cols, 1);
        let mut out = Tensor::zeros(rv.rows, 1);
        for r in 0..rv.rows {
            let (rt, at) = (rv.data[r], av.data[r]);
            let clipped = rt.clamp(1.0 - eps, 1.0 + eps);
            out.data[r] = -(rt * at).min(clipped * at);
        }
        self.push(out, Op::ClippedSurrogate { ratio, adv, eps })
    }

    pub fn gauss_entropy(&mut self, log_sigma: NodeId) -> NodeId {
        let sv = &self.nodes[log_sigma.0].value;
        let h: f64 = sv.data.iter().map(|ls| ls + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum();
        self.push(Tensor::scalar(h), Op::GaussEntropy { log_sigma })
    }

    /// Reverse sweep from `loss` (must be 1x1). Adjoints accumulate into
    /// every node's `grad`; read them off leaves afterwards.
    pub fn backward(&mut self, loss: NodeId) {
        {
            let t = &self.nodes[loss.0].value;
            assert_eq!((t.rows, t.cols), (1, 1), "backward target must be scalar");
        }
        for n in &mut self.nodes {
            n.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad.data[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { x, w } => {
                    let (b, n) = (self.nodes[x.0].value.rows, self.nodes[x.0].value.cols);
                    let m = self.nodes[w.0].value.cols;
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    // dX += dY (B×m) · W^T (m×n)
                    {
                        let wv = std::mem::take(&mut self.nodes[w.0].value.data);
                        let gx = &mut self.nodes[x.0].grad.data;
                        for s in 0..b {
                            for r in 0..n {
                                let wrow = &wv[r * m..(r + 1) * m];
                                let gorow = &go[s * m..(s + 1) * m];
                                let mut acc = 0.0;
                                for c in 0..m {
                                    acc += gorow[c] * wrow[c];
                                }
                                gx[s * n + r] += acc;
                            }
                        }
                        self.nodes[w.0].value.data = wv;
                    }
                    // dW += X^T (n×B) · dY (B×m)
                    {
                        let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                        let gw = &mut self.nodes[w.0].grad.data;
                        for s in 0..b {
                            let gorow = &go[s * m..(s + 1) * m];
                            for r in 0..n {
                                let xs = xv[s * n + r];
                                if xs != 0.0 {
                                    let gwrow = &mut gw[r * m..(r + 1) * m];
                                    for c in 0..m {
                                        gwrow[c] += xs * gorow[c];
                                    }
                                }
                            }
                        }
                        self.nodes[x.0].value.data = xv;
                    }
                    self.nodes[i].grad.data = go;
                }
                Op::AddRow { x, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let cols = self.nodes[b.0].value.cols;
                    {
                        let gx = &mut self.nodes[x.0].grad.data;
                        for (g, &v) in gx.iter_mut().zip(&go) {
                            *g += v;
                        }
                    }
                    {
                        let gb = &mut self.nodes[b.0].grad.data;
                        for (idx, &v) in go.iter().enumerate() {
                            gb[idx % cols] += v;
                        }
                    }
                    self.nodes[i].grad.data = go;
                }
                Op::Tanh { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let yv = std::mem::take(&mut self.nodes[i].value.data);
                    {
                        let gx = &mut self.nodes[x.0].grad.data;
                        for ((g, &y), &v) in gx.iter_mut().zip(&yv).zip(&go) {
                            *g += v * (1.0 - y * y);
                        }
                    }
                    self.nodes[i].value.data = yv;
                    self.nodes[i].grad.data = go;
                }
                Op::Add { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    for (g, &v) in self.nodes[a.0].grad.data.iter_mut().zip(&go) {
                        *g += v;
                    }
                    for (g, &v) in self.nodes[b.0].grad.data.iter_mut().zip(&go) {
                        *g += v;
                    }
                    self.nodes[i].grad.data = go;
                }
                Op::Sub { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    for (g, &v) in self.nodes[a.0].grad.data.iter_mut().zip(&go) {
                        *g += v;
                    }
                    for (g, &v) in self.nodes[b.0].grad.data.iter_mut().zip(&go) {
                        *g -= v;
                    }
                    self.nodes[i].grad.data = go;
                }
                Op::Mul { a, b } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let av = std::mem::take(&mut self.nodes[a.0].value.data);
                    let bv = std::mem::take(&mut self.nodes[b.0].value.data);
                    for ((g, &v), &y) in self.nodes[a.0].grad.data.iter_mut().zip(&go).zip(&bv) {
                        *g += v * y;
                    }
                    for ((g, &v), &x) in self.nodes[b.0].grad.data.iter_mut().zip(&go).zip(&av) {
                        *g += v * x;
                    }
                    self.nodes[a.0].value.data = av;
                    self.nodes[b.0].value.data = bv;
                    self.nodes[i].grad.data = go;
                }
                Op::Square { x } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                    for ((g, &v), &xx) in self.nodes[x.0].grad.data.iter_mut().zip(&go).zip(&xv) {
                        *g += 2.0 * xx * v;
                    }
                    self.nodes[x.0].value.data = xv;
                    self.nodes[i].grad.data = go;
                }
                Op::Scale { x, c } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    for (g, &v) in self.nodes[x.0].grad.data.iter_mut().zip(&go) {
                        *g += c * v;
                    }
                    self.nodes[i].grad.data = go;
                }
                Op::SumAll { x } => {
                    let g0 = self.nodes[i].grad.data[0];
                    for g in self.nodes[x.0].grad.data.iter_mut() {
                        *g += g0;
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.data.len() as f64;
                    let g0 = self.nodes[i].grad.data[0] / n;
                    for g in self.nodes[x.0].grad.data.iter_mut() {
                        *g += g0;
                    }
                }
                Op::ExpClamp { x, lo, hi } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                    for ((g, &v), &xx) in self.nodes[x.0].grad.data.iter_mut().zip(&go).zip(&xv) {
                        let e = xx.exp();
                        if e > lo && e < hi {
                            *g += v * e;
                        }
                    }
                    self.nodes[x.0].value.data = xv;
                    self.nodes[i].grad.data = go;
                }
                Op::GaussLogProb { mu, log_sigma, actions } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let mv = std::mem::take(&mut self.nodes[mu.0].value.data);
                    let av = std::mem::take(&mut self.nodes[actions.0].value.data);
                    let sv = std::mem::take(&mut self.nodes[log_sigma.0].value.data);
                    let cols = sv.len();
                    let rows = go.len();
                    for r in 0..rows {
                        let g0 = go[r];
                        if g0 == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            let sigma = sv[c].exp();
                            let diff = av[r * cols + c] - mv[r * cols + c];
                            let inv_var = 1.0 / (sigma * sigma);
                            // d lp / d mu = (a - mu) / sigma^2
                            self.nodes[mu.0].grad.data[r * cols + c] += g0 * diff * inv_var;
                            // d lp / d a = -(a - mu) / sigma^2
                            self.nodes[actions.0].grad.data[r * cols + c] -= g0 * diff * inv_var;
                            // d lp / d log_sigma = (a - mu)^2 / sigma^2 - 1
                            self.nodes[log_sigma.0].grad.data[c] += g0 * (diff * diff * inv_var - 1.0);
                        }
                    }
                    self.nodes[mu.0].value.data = mv;
                    self.nodes[actions.0].value.data = av;
                    self.nodes[log_sigma.0].value.data = sv;
                    self.nodes[i].grad.data = go;
                }
                Op::ClippedSurrogate { ratio, adv, eps } => {
                    let go = std::mem::take(&mut self.nodes[i].grad.data);
                    let rv = std::mem::take(&mut self.nodes[ratio.0].value.data);
                    let av = std::mem::take(&mut self.nodes[adv.0].value.data);
                    for r in 0..go.len() {
                        let (rt, at) = (rv[r], av[r]);
                        let clipped = rt.clamp(1.0 - eps, 1.0 + eps);
                        // the ratio carries gradient unless the clipped
                        // branch was picked while saturated
                        let active =
                            rt * at <= clipped * at || (rt > 1.0 - eps && rt < 1.0 + eps);
                        if active {
                            self.nodes[ratio.0].grad.data[r] -= go[r] * at;
                        }
                    }
                    self.nodes[ratio.0].value.data = rv;
                    self.nodes[adv.0].value.data = av;
                    self.nodes[i].grad.data = go;
                }
                Op::GaussEntropy { log_sigma } => {
                    let g0 = self.nodes[i].grad.data[0];
                    for g in self.nodes[log_sigma.0].grad.data.iter_mut() {
                        *g += g0;
                    }
                }
            }
        }
    }
}

/// `out += x (b×n) · w (n×m)`, row-major.
pub fn matmul_acc(x: &[f64], w: &[f64], out: &mut [f64], b: usize, n: usize, m: usize) {
    for s in 0..b {
        let xrow = &x[s * n..(s + 1) * n];
        let orow = &mut out[s * m..(s + 1) * m];
        for (r, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[r * m..(r + 1) * m];
            for c in 0..m {
                orow[c] += xv * wrow[c];
            }
        }
    }
}

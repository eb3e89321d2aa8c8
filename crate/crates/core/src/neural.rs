//! Two-layer graph convolutional network with hand-derived gradients.
//!
//! Forward pass (training mode applies inverted dropout to both layer
//! inputs):
//!
//! ```text
//! P = Â · drop(X) · W0      H = relu(P)
//! Z = Â · drop(H) · W1      probs = softmax_rows(Z)
//! ```
//!
//! Backward pass, with `G = ∂L/∂Z`:
//!
//! ```text
//! ∂W1 = drop(H)ᵀ · (Â G)
//! ∂P  = ((Â G) W1ᵀ ∘ mask_H) ∘ [P > 0]
//! ∂W0 = drop(X)ᵀ · (Â ∂P) + λ W0
//! ```
//!
//! `Â` is symmetric so `Âᵀ = Â`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::linalg::Csr;

/// Lower clamp for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the two graph convolutions. No bias terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
}

impl GcnParams {
    /// Glorot-uniform initialization.
    pub fn glorot(n_features: usize, hidden: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w0: glorot_matrix(n_features, hidden, rng),
            w1: glorot_matrix(hidden, n_out, rng),
        }
    }

    pub fn zeros(n_features: usize, hidden: usize, n_out: usize) -> Self {
        Self {
            w0: Array2::zeros((n_features, hidden)),
            w1: Array2::zeros((hidden, n_out)),
        }
    }

    pub fn n_features(&self) -> usize {
        self.w0.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w0.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.w1.ncols()
    }

    fn check_shapes(&self) -> Result<()> {
        if self.w1.nrows() != self.w0.ncols() {
            return Err(Error::Structural(format!(
                "W0 is {:?} but W1 is {:?}",
                self.w0.dim(),
                self.w1.dim()
            )));
        }
        Ok(())
    }

    /// Writes the text checkpoint format:
    ///
    /// ```text
    /// gcn-params v1
    /// w0 <rows> <cols>
    /// <cols space-separated values>      (one line per row)
    /// w1 <rows> <cols>
    /// ...
    /// ```
    ///
    /// Values use the shortest representation that parses back to the same
    /// `f64`.
    pub fn write_text(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "gcn-params v1")?;
        for (name, m) in [("w0", &self.w0), ("w1", &self.w1)] {
            writeln!(out, "{name} {} {}", m.nrows(), m.ncols())?;
            for row in m.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(checkpoint_error(i + 1, e.to_string())),
                None => Err(checkpoint_error(0, format!("unexpected end of input, expected {what}"))),
            }
        };
        let (ln, header) = next("header")?;
        if header.trim() != "gcn-params v1" {
            return Err(checkpoint_error(ln, format!("bad header {header:?}")));
        }
        let mut read_matrix = |name: &str| -> Result<Array2<f64>> {
            let (ln, shape) = next(name)?;
            let parts: Vec<&str> = shape.split_whitespace().collect();
            let (rows, cols) = match parts.as_slice() {
                [n, r, c] if *n == name => (
                    r.parse::<usize>().map_err(|e| checkpoint_error(ln, e.to_string()))?,
                    c.parse::<usize>().map_err(|e| checkpoint_error(ln, e.to_string()))?,
                ),
                _ => return Err(checkpoint_error(ln, format!("expected `{name} <rows> <cols>`"))),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = next("matrix row")?;
                let before = data.len();
                for tok in row.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| checkpoint_error(ln, e.to_string()))?);
                }
                if data.len() - before != cols {
                    return Err(checkpoint_error(ln, format!("expected {cols} values")));
                }
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
        };
        let w0 = read_matrix("w0")?;
        let w1 = read_matrix("w1")?;
        let params = Self { w0, w1 };
        params.check_shapes()?;
        Ok(params)
    }
}

fn checkpoint_error(line: usize, message: String) -> Error {
    Error::Parse {
        path: "<checkpoint>".into(),
        line,
        message,
    }
}

fn glorot_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

/// Dropout multipliers: `0` for dropped entries, `1/(1-p)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// One multiplier per stored entry of the sparse input features.
    pub input: Vec<f64>,
    /// Same shape as the hidden layer.
    pub hidden: Array2<f64>,
}

impl DropoutMasks {
    pub fn sample(x: &Csr, n_nodes: usize, hidden: usize, p: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - p);
        // Drop with probability p by comparing a uniform u32 to p·2³².
        let threshold = (p * 4_294_967_296.0) as u64;
        let mut draw = || {
            if u64::from(rng.next_u32()) < threshold {
                0.0
            } else {
                keep
            }
        };
        let input = (0..x.nnz()).map(|_| draw()).collect();
        let hidden = Array2::from_shape_simple_fn((n_nodes, hidden), draw);
        Self { input, hidden }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// First-layer pre-activation.
    pub pre_hidden: Array2<f64>,
    /// First-layer output after ReLU (before dropout).
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub masks: Option<DropoutMasks>,
}

pub fn gcn_forward(
    adj: &NormalizedAdjacency,
    x: &Csr,
    params: &GcnParams,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<ForwardCache> {
    let masks = match mode {
        Mode::Eval => None,
        Mode::Train { dropout } => {
            if !(0.0..1.0).contains(&dropout) {
                return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
            }
            Some(DropoutMasks::sample(x, x.n_rows(), params.hidden(), dropout, rng))
        }
    };
    gcn_forward_with_masks(adj, x, params, masks)
}

/// Forward pass with explicit dropout masks (`None` is evaluation mode).
pub fn gcn_forward_with_masks(
    adj: &NormalizedAdjacency,
    x: &Csr,
    params: &GcnParams,
    masks: Option<DropoutMasks>,
) -> Result<ForwardCache> {
    params.check_shapes()?;
    let a = adj.matrix();
    if x.n_cols() != params.n_features() || a.n_rows() != x.n_rows() {
        return Err(Error::Structural(format!(
            "features {}x{}, adjacency {}x{}, W0 {:?}",
            x.n_rows(),
            x.n_cols(),
            a.n_rows(),
            a.n_cols(),
            params.w0.dim()
        )));
    }
    if let Some(m) = &masks {
        if m.input.len() != x.nnz() || m.hidden.dim() != (x.n_rows(), params.hidden()) {
            return Err(Error::Structural("dropout masks do not match the inputs".into()));
        }
    }
    let xw = x.matmul_masked(masks.as_ref().map(|m| m.input.as_slice()), params.w0.view());
    let pre_hidden = a.matmul(xw.view());
    ensure_finite(&pre_hidden, "layer 1")?;
    let hidden = pre_hidden.mapv(|v| v.max(0.0));
    let hw = match &masks {
        Some(m) => (&hidden * &m.hidden).dot(&params.w1),
        None => hidden.dot(&params.w1),
    };
    let logits = a.matmul(hw.view());
    ensure_finite(&logits, "layer 2")?;
    let probs = softmax_rows(&logits);
    Ok(ForwardCache {
        pre_hidden,
        hidden,
        logits,
        probs,
        masks,
    })
}

fn ensure_finite(m: &Array2<f64>, layer: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: layer.into() })
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient of the loss with respect to the logits; zero on rows that
    /// are not part of the loss.
    pub grad_logits: Array2<f64>,
}

/// Mean cross-entropy over the labeled rows.
pub fn ce_loss_and_grad(cache: &ForwardCache, labeled: &BTreeMap<usize, usize>) -> Result<LossGrad> {
    if labeled.is_empty() {
        return Err(Error::Precondition("cross-entropy over an empty labeled set".into()));
    }
    let rows = labeled.iter().map(|(&node, &class)| (node, class, 1.0));
    weighted_rows_ce(&cache.probs, rows, labeled.len())
}

/// Cross-entropy for the `C+1`-way filter: labeled rows target their ID
/// class with weight 1, unknown rows target class `C` with weight
/// `w_unknown`. The sum is divided by the number of training rows.
pub fn weighted_ce_loss_and_grad(
    cache: &ForwardCache,
    labeled: &BTreeMap<usize, usize>,
    unknown: &BTreeSet<usize>,
    w_unknown: f64,
) -> Result<LossGrad> {
    if !(w_unknown > 0.0 && w_unknown.is_finite()) {
        return Err(Error::Config(format!(
            "unknown-class weight must be positive, got {w_unknown}"
        )));
    }
    let k = cache.probs.ncols();
    if k < 2 {
        return Err(Error::Structural("filter needs at least two outputs".into()));
    }
    let unknown_class = k - 1;
    if let Some((n, c)) = labeled.iter().find(|(_, &c)| c >= unknown_class) {
        return Err(Error::Precondition(format!(
            "labeled node {n} has class {c}, but ID classes must be < {unknown_class}"
        )));
    }
    if let Some(n) = unknown.iter().find(|n| labeled.contains_key(n)) {
        return Err(Error::Precondition(format!("node {n} is both labeled and unknown")));
    }
    let n_rows = labeled.len() + unknown.len();
    if n_rows == 0 {
        return Err(Error::Precondition("weighted cross-entropy over no rows".into()));
    }
    let rows = labeled
        .iter()
        .map(|(&node, &class)| (node, class, 1.0))
        .chain(unknown.iter().map(|&node| (node, unknown_class, w_unknown)));
    weighted_rows_ce(&cache.probs, rows, n_rows)
}

fn weighted_rows_ce(
    probs: &Array2<f64>,
    rows: impl Iterator<Item = (usize, usize, f64)>,
    n_rows: usize,
) -> Result<LossGrad> {
    let (n, k) = probs.dim();
    let scale = 1.0 / n_rows as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, k));
    for (node, class, weight) in rows {
        if node >= n || class >= k {
            return Err(Error::Precondition(format!(
                "target (node {node}, class {class}) outside a {n}x{k} output"
            )));
        }
        let p = probs.row(node);
        loss -= weight * p[class].max(PROB_FLOOR).ln();
        let mut g = grad.row_mut(node);
        g.assign(&p);
        g[class] -= 1.0;
        g *= weight * scale;
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad_logits: grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
}

/// Exact parameter gradients of `loss + ½·weight_decay·‖W0‖²`.
pub fn gcn_backward(
    adj: &NormalizedAdjacency,
    x: &Csr,
    params: &GcnParams,
    cache: &ForwardCache,
    grad_logits: &Array2<f64>,
    weight_decay: f64,
) -> Result<Gradients> {
    let a = adj.matrix();
    let n = a.n_rows();
    if cache.hidden.dim() != (n, params.hidden())
        || grad_logits.dim() != (n, params.n_out())
        || x.n_cols() != params.n_features()
    {
        return Err(Error::Structural("forward cache does not match the parameters".into()));
    }
    let g_hw = a.matmul(grad_logits.view());
    let hidden_in = match &cache.masks {
        Some(m) => &cache.hidden * &m.hidden,
        None => cache.hidden.clone(),
    };
    let w1 = hidden_in.t().dot(&g_hw);

    let mut g_pre = g_hw.dot(&params.w1.t());
    if let Some(m) = &cache.masks {
        g_pre *= &m.hidden;
    }
    Zip::from(&mut g_pre).and(&cache.pre_hidden).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let g_xw = a.matmul(g_pre.view());
    let mut w0 = x.transpose_matmul_masked(cache.masks.as_ref().map(|m| m.input.as_slice()), g_xw.view());
    if weight_decay != 0.0 {
        w0.scaled_add(weight_decay, &params.w0);
    }
    Ok(Gradients { w0, w1 })
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m0: Array2<f64>,
    pub v0: Array2<f64>,
    pub m1: Array2<f64>,
    pub v1: Array2<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &GcnParams, lr: f64, weight_decay: f64) -> Self {
        Self {
            m0: Array2::zeros(params.w0.dim()),
            v0: Array2::zeros(params.w0.dim()),
            m1: Array2::zeros(params.w1.dim()),
            v1: Array2::zeros(params.w1.dim()),
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut GcnParams, grads: &Gradients, state: &mut OptimizerState) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (p, g, m, v) in [
        (&mut params.w0, &grads.w0, &mut state.m0, &mut state.v0),
        (&mut params.w1, &grads.w1, &mut state.m1, &mut state.v1),
    ] {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
}

/// Shannon entropy (natural log) of each row; `0·ln 0 = 0`.
pub fn row_entropy(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .collect()
}

/// Argmax of each row; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

//! Stochastic token-boundary policy.
//!
//! For every byte position `i` the policy reads the encoder state `X_i` and
//! the last `w` boundary decisions:
//!
//! ```text
//! l_raw[i]    = W_0 X_i + sum_{j=1..w} a[i-j] * W_j X_i      (a[k] = 0 for k < 0)
//! l_scaled[i] = l_raw[i] / D + logit(target_rate)
//! l[i]        = cap * tanh(l_scaled[i] / cap)   (train)  |  l_scaled[i]  (eval)
//! a[i]        ~ Bernoulli(sigmoid(l[i])),       a[0] = 1 forced
//! ```
//!
//! All `W_j X_i` come out of one `[N, d] x [d, w + 1]` product. The scan over
//! positions is sequential because `a[i]` must be drawn before `l[i + 1]` is
//! known. Once the mask is fixed, the same logits are rebuilt on the graph so
//! that `log pi(a | x)` can be differentiated; both paths use the same
//! floating-point operations in the same order and agree bit for bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Whether boundary logits are softcapped (training) or used as scaled (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyConfig {
    /// Number of previous decisions visible to each logit (`w`).
    pub window: usize,
    /// Divisor applied to raw logits (`D`).
    pub logit_scale: f64,
    pub target_rate: f64,
    pub softcap: f64,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_rate > 0.0 && self.target_rate < 1.0) {
            return Err(Error::Config(format!(
                "target rate {} must lie in (0, 1)",
                self.target_rate
            )));
        }
        if !(self.logit_scale > 0.0) || !(self.softcap > 0.0) {
            return Err(Error::Config("logit scale and softcap must be positive".into()));
        }
        Ok(())
    }

    /// `logit(target_rate)`, the constant shift of the scaled logits.
    pub fn shift(&self) -> f64 {
        inverse_sigmoid(self.target_rate)
    }

    /// Final boundary logit from a raw logit, exactly as the graph computes it.
    pub fn logit_from_raw(&self, raw: f64, mode: Mode) -> f64 {
        let scaled = scale_and_shift(raw, self.logit_scale, self.target_rate);
        match mode {
            Mode::Train => (scaled * (1.0 / self.softcap)).tanh() * self.softcap,
            Mode::Eval => eval_logit(scaled),
        }
    }
}

/// `ln(p / (1 - p))`.
pub fn inverse_sigmoid(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `raw / scale + logit(target_rate)`.
pub fn scale_and_shift(raw: f64, scale: f64, target_rate: f64) -> f64 {
    raw * (1.0 / scale) + inverse_sigmoid(target_rate)
}

/// Evaluation-time boundary logit: the scaled logit, uncapped.
pub fn eval_logit(scaled: f64) -> f64 {
    scaled
}

/// Raw logit at position `i` from the projected row `proj = [W_0 X_i, ..., W_w X_i]`
/// and the decisions already made.
pub fn raw_logit_at(proj: &[f64], mask: &[bool], i: usize) -> f64 {
    proj.iter()
        .enumerate()
        .map(|(j, p)| {
            let on = j == 0 || (j <= i && mask[i - j]);
            p * if on { 1.0 } else { 0.0 }
        })
        .sum()
}

/// Where boundary decisions come from.
pub enum BoundarySource<'a, R: Rng> {
    /// Bernoulli draws from the policy.
    Sample(&'a mut R),
    /// `a[i] = p[i] >= threshold`; deterministic, for visualization.
    Threshold(f64),
    /// Externally supplied mask (frozen stochastic node, uniform baseline).
    Fixed(&'a [bool]),
}

/// Runs the sequential scan over precomputed projections `proj: [n, w + 1]`
/// and returns the decision mask. Position 0 is always a boundary.
pub fn sample_boundaries<R: Rng>(
    proj: &Tensor,
    cfg: &PolicyConfig,
    mode: Mode,
    source: BoundarySource<'_, R>,
) -> Result<Vec<bool>> {
    let (n, _) = proj.dims2("sample_boundaries")?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    if let BoundarySource::Fixed(mask) = source {
        if mask.len() != n || !mask[0] {
            return Err(Error::shape(
                "boundary mask",
                format!("need {n} decisions starting with a boundary, got {}", mask.len()),
            ));
        }
        return Ok(mask.to_vec());
    }
    let mut source = source;
    let mut mask = vec![false; n];
    mask[0] = true;
    for i in 0..n {
        let logit = cfg.logit_from_raw(raw_logit_at(proj.row(i), &mask, i), mode);
        if !logit.is_finite() {
            return Err(Error::NonFiniteLogit(i));
        }
        if i == 0 {
            continue;
        }
        let p = sigmoid(logit);
        mask[i] = match &mut source {
            BoundarySource::Sample(rng) => rng.gen::<f64>() < p,
            BoundarySource::Threshold(t) => p >= *t,
            BoundarySource::Fixed(_) => unreachable!(),
        };
    }
    Ok(mask)
}

/// Graph nodes of one sequence's boundary decisions.
#[derive(Clone, Debug)]
pub struct BoundaryTrace {
    pub mask: Vec<bool>,
    /// `[n]` raw logits.
    pub raw_logits: Var,
    pub scaled_logits: Var,
    /// Logits after the mode-dependent cap; `p = sigmoid(logits)`.
    pub logits: Var,
    pub probs: Var,
    /// `log pi(a_i | x_{<=i}, a_{<i})`; exactly 0 at the forced position 0.
    pub log_pi: Var,
}

impl BoundaryTrace {
    pub fn num_tokens(&self) -> usize {
        self.mask.iter().filter(|&&a| a).count()
    }
}

/// Builds the differentiable boundary logits for a known `mask` from the
/// projection node `proj = X @ W_policy`.
pub fn boundary_graph(
    g: &mut Graph,
    proj: Var,
    mask: &[bool],
    cfg: &PolicyConfig,
    mode: Mode,
) -> Result<BoundaryTrace> {
    let (n, cols) = g.value(proj).dims2("boundary_graph")?;
    if mask.len() != n {
        return Err(Error::shape(
            "boundary_graph",
            format!("mask of {} for {n} positions", mask.len()),
        ));
    }
    let mut coef = vec![0.0; n * cols];
    for i in 0..n {
        for j in 0..cols {
            let on = j == 0 || (j <= i && mask[i - j]);
            coef[i * cols + j] = if on { 1.0 } else { 0.0 };
        }
    }
    let coef = g.constant(Tensor::matrix(n, cols, coef)?);
    let terms = g.mul(proj, coef)?;
    let raw_logits = g.sum_last(terms)?;
    let scaled = g.scale(raw_logits, 1.0 / cfg.logit_scale);
    let scaled_logits = g.add_scalar(scaled, cfg.shift());
    let logits = match mode {
        Mode::Train => crate::nn::softcap(g, scaled_logits, cfg.softcap),
        Mode::Eval => scaled_logits,
    };
    let probs = g.sigmoid(logits);
    // log pi(a) = log sigmoid(+l) for a = 1, log sigmoid(-l) for a = 0.
    let signs = g.constant(Tensor::vector(
        mask.iter().map(|&a| if a { 1.0 } else { -1.0 }).collect(),
    ));
    let signed = g.mul(logits, signs)?;
    let lp = g.log_sigmoid(signed);
    let free = g.constant(Tensor::vector(
        (0..n).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect(),
    ));
    let log_pi = g.mul(lp, free)?;
    Ok(BoundaryTrace {
        mask: mask.to_vec(),
        raw_logits,
        scaled_logits,
        logits,
        probs,
        log_pi,
    })
}

/// Exactly `round(n * rate)` boundaries at positions `floor(k * n / m)`, which
/// includes position 0 and never collides.
pub fn uniform_baseline_mask(n: usize, rate: f64) -> Vec<bool> {
    let m = ((n as f64 * rate).round() as usize).clamp(1, n.max(1));
    let mut mask = vec![false; n];
    for k in 0..m {
        mask[k * n / m] = true;
    }
    mask
}

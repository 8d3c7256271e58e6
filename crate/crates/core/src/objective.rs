//! Score-function objective for the boundary policy and the language-model
//! losses it is combined with.
//!
//! Indexing: an input row has `n` positions (BOS plus `n - 1` content bytes)
//! and row `i` of the logits predicts `targets[i]`, the byte at input position
//! `i + 1`. The reward of that byte is `r[i] = lm_lp[i] - early_lp[i]`. The
//! decision `a_i` first influences prediction `i`, so its return is
//! `G_i = sum_{j>=0} gamma^j r[i + j]`.
//!
//! Rewards, returns and advantages are plain `f64` values: they can only enter
//! the graph as constants, so no gradient flows through them.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Log-probability of each realized target under `logits: [n, vocab]`.
pub fn target_logprobs(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let (n, vocab) = g.value(logits).dims2("target_logprobs")?;
    if targets.len() != n {
        return Err(Error::shape(
            "target_logprobs",
            format!("{} targets for {n} rows", targets.len()),
        ));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let lp = g.log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    g.pick(lp, &idx)
}

/// `lm - early`, elementwise.
pub fn rewards(lm_logprobs: &[f64], early_logprobs: &[f64]) -> Result<Vec<f64>> {
    if lm_logprobs.len() != early_logprobs.len() {
        return Err(Error::shape(
            "rewards",
            format!("{} vs {}", lm_logprobs.len(), early_logprobs.len()),
        ));
    }
    Ok(lm_logprobs
        .iter()
        .zip(early_logprobs)
        .map(|(a, b)| a - b)
        .collect())
}

/// `G_i = sum_{j=0}^{n-i-2} gamma^j R_{i+j+1}`: strictly future rewards, so
/// `G` at the last index is 0 and `R_0` is never read.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    for i in (0..n.saturating_sub(1)).rev() {
        out[i] = rewards[i + 1] + gamma * out[i + 1];
    }
    out
}

/// Return of every decision of a row whose target rewards are `r` (one per
/// input position).
pub fn decision_returns(r: &[f64], gamma: f64) -> Vec<f64> {
    let mut padded = Vec::with_capacity(r.len() + 1);
    padded.push(0.0);
    padded.extend_from_slice(r);
    let mut g = discounted_returns(&padded, gamma);
    g.truncate(r.len());
    g
}

/// `A_{b,i} = G_{b,i} - mean_b G_{b,i}`.
pub fn batch_advantages(returns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let b = returns.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let n = returns[0].len();
    if returns.iter().any(|r| r.len() != n) {
        return Err(Error::shape("batch_advantages", "ragged returns"));
    }
    let mut mean = vec![0.0; n];
    for row in returns {
        for (m, g) in mean.iter_mut().zip(row) {
            *m += g;
        }
    }
    for m in &mut mean {
        *m /= b as f64;
    }
    Ok(returns
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(g, m)| g - m).collect())
        .collect())
}

/// `-sum_{i>=1} log_pi_i * A_i` for one row; position 0 is forced and skipped.
pub fn policy_loss(g: &mut Graph, log_pi: Var, advantages: &[f64]) -> Result<Var> {
    let n = g.value(log_pi).numel();
    if advantages.len() != n {
        return Err(Error::shape(
            "policy_loss",
            format!("{} advantages for {n} decisions", advantages.len()),
        ));
    }
    let coef: Vec<f64> = advantages
        .iter()
        .enumerate()
        .map(|(i, a)| if i == 0 { 0.0 } else { -a })
        .collect();
    let coef = g.constant(Tensor::vector(coef));
    let terms = g.mul(log_pi, coef)?;
    Ok(g.sum(terms))
}

/// One row's share of `mean(l) * (p_mean - target)`, where the mean runs over
/// the `count` free decisions of the whole batch and `p_mean` is a constant.
pub fn target_loss(g: &mut Graph, logits: Var, p_mean: f64, target_rate: f64, count: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    let coef = (p_mean - target_rate) / count as f64;
    let weights: Vec<f64> = (0..n).map(|i| if i == 0 { 0.0 } else { coef }).collect();
    let weights = g.constant(Tensor::vector(weights));
    let terms = g.mul(logits, weights)?;
    Ok(g.sum(terms))
}

/// Negative summed log-likelihood.
pub fn nll(g: &mut Graph, logprobs: Var) -> Var {
    let s = g.sum(logprobs);
    g.scale(s, -1.0)
}

/// Loss weights of the full objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pi: f64,
    pub target: f64,
    pub early: f64,
}

/// `auto + w.pi * pi + w.target * target + w.early * early`.
pub fn total_loss(g: &mut Graph, auto: Var, pi: Var, target: Var, early: Var, w: &LossWeights) -> Result<Var> {
    let pi = g.scale(pi, w.pi);
    let target = g.scale(target, w.target);
    let early = g.scale(early, w.early);
    let t = g.add(auto, pi)?;
    let t = g.add(t, target)?;
    g.add(t, early)
}

/// Batch loss components in nats, summed over rows and positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub auto: f64,
    pub early: f64,
    pub pi: f64,
    pub target: f64,
    pub total: f64,
    /// Number of predicted bytes behind `auto`.
    pub bytes: usize,
}

impl LossReport {
    pub fn bits_per_byte(&self) -> f64 {
        bits_per_byte(self.auto, self.bytes)
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.auto += other.auto;
        self.early += other.early;
        self.pi += other.pi;
        self.target += other.target;
        self.total += other.total;
        self.bytes += other.bytes;
    }
}

/// `nats / bytes / ln 2`.
pub fn bits_per_byte(nats: f64, bytes: usize) -> f64 {
    nats / bytes as f64 / std::f64::consts::LN_2
}

/// One row of the per-step metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossReport,
    pub mean_prob: f64,
    pub rate: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,l_auto,l_early,l_pi,l_target,l_total,bits_per_byte,mean_p,rate,grad_norm,lr";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            l.auto,
            l.early,
            l.pi,
            l.target,
            l.total,
            l.bits_per_byte(),
            self.mean_prob,
            self.rate,
            self.grad_norm,
            self.lr
        )
    }
}

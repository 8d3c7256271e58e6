//! Exact enumeration over every boundary mask of a toy model.
//!
//! For each mask `a` this records the probability `pi(a)`, the per-target
//! log-likelihoods of both heads, the gradient of `sum log p(y | a, x)` with
//! the mask frozen, and the gradient of each decision's log-probability. Any
//! score-function estimate for a drawn mask is then a linear combination of
//! stored gradients.

use rand_chacha::ChaCha8Rng;
use scoretok::batch::RowPass;
use scoretok::data::input_row;
use scoretok::objective;
use scoretok::params::Bound;
use scoretok::policy::{BoundarySource, Mode};
use scoretok::{Graph, Model, ModelConfig, Result, Var};

use super::{all_masks, rng, uniform};

/// N = 6 positions, d = 4, one layer per stage, every policy offset live.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        num_heads: 1,
        n_down_layers: 1,
        n_mid_layers: 1,
        n_up_layers: 1,
        byte_window: 6,
        seq_len: 6,
        policy_window: 5,
        ..ModelConfig::default()
    }
}

pub fn toy_model(seed: u64, policy_scale: f64) -> Model {
    let mut model = Model::new(toy_config(), seed).unwrap();
    let id = model.policy_param();
    let shape = model.params().get(id).shape().to_vec();
    *model.params_mut().get_mut(id) = uniform(&mut rng(seed ^ 0x5eed), &shape, -policy_scale, policy_scale);
    model
}

/// Input ids and targets of a fixed six-byte document.
pub fn toy_row(content: &[u8]) -> (Vec<u32>, Vec<u32>) {
    let row = input_row(content);
    (row[..content.len()].to_vec(), row[1..].to_vec())
}

pub struct MaskTerms {
    pub mask: Vec<bool>,
    pub prob: f64,
    pub lm: Vec<f64>,
    pub early: Vec<f64>,
    /// Gradient of `sum_i lm_i` with the mask frozen.
    pub cond: Vec<f64>,
    /// `scores[i]` is the gradient of `log pi(a_i)`; zero for the forced
    /// first decision.
    pub scores: Vec<Vec<f64>>,
}

impl MaskTerms {
    pub fn lm_total(&self) -> f64 {
        self.lm.iter().sum()
    }

    /// `cond + sum_i coef_i * scores_i`.
    pub fn estimate(&self, coef: &[f64], with_cond: bool) -> Vec<f64> {
        let mut out = if with_cond { self.cond.clone() } else { vec![0.0; self.cond.len()] };
        for (c, s) in coef.iter().zip(&self.scores) {
            for (o, v) in out.iter_mut().zip(s) {
                *o += c * v;
            }
        }
        out
    }
}

fn flat(grads: Vec<Vec<f64>>) -> Vec<f64> {
    grads.into_iter().flatten().collect()
}

fn row(model: &Model, ids: &[u32], targets: &[u32], mask: &[bool]) -> RowPass {
    RowPass::run::<ChaCha8Rng>(model, ids, targets, BoundarySource::Fixed(mask), Mode::Train, true).unwrap()
}

pub fn enumerate(model: &Model, ids: &[u32], targets: &[u32]) -> Vec<MaskTerms> {
    let n = ids.len();
    let store = model.params();
    all_masks(n)
        .into_iter()
        .map(|mask| {
            let mut pass = row(model, ids, targets, &mask);
            let lm = pass.values(pass.lm_logprobs).to_vec();
            let early = pass.values(pass.early_logprobs).to_vec();
            let prob = pass.values(pass.trace.boundary.log_pi).iter().sum::<f64>().exp();
            let total = pass.graph.sum(pass.lm_logprobs);
            pass.graph.backward(total).unwrap();
            let cond = flat(pass.bound.grads(&pass.graph, store));
            let mut scores = vec![vec![0.0; cond.len()]];
            for i in 1..n {
                let mut pass = row(model, ids, targets, &mask);
                let g = &mut pass.graph;
                let mut unit = vec![0.0; n];
                unit[i] = -1.0;
                // policy_loss is -sum log_pi * A, so A = -e_i gives log_pi_i.
                let lp = objective::policy_loss(g, pass.trace.boundary.log_pi, &unit).unwrap();
                g.backward(lp).unwrap();
                scores.push(flat(pass.bound.grads(g, store)));
            }
            MaskTerms {
                mask,
                prob,
                lm,
                early,
                cond,
                scores,
            }
        })
        .collect()
}

/// `sum_a pi(a) * sum_i log p(y_i | a, x)` as one differentiable scalar.
pub fn expected_loglik(g: &mut Graph, p: &Bound, model: &Model, ids: &[u32], targets: &[u32]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for mask in all_masks(ids.len()) {
        let t = model.forward::<ChaCha8Rng>(g, p, ids, BoundarySource::Fixed(&mask), Mode::Train)?;
        let lm = objective::target_logprobs(g, t.lm_logits, targets)?;
        let f = g.sum(lm);
        let logp = g.sum(t.boundary.log_pi);
        let prob = g.exp(logp);
        let term = g.mul(prob, f)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one mask"))
}

/// Exact gradient of [`expected_loglik`] by reverse mode.
pub fn exact_gradient(model: &Model, ids: &[u32], targets: &[u32]) -> Vec<f64> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let j = expected_loglik(&mut g, &p, model, ids, targets).unwrap();
    g.backward(j).unwrap();
    flat(p.grads(&g, model.params()))
}

/// Coefficients of the plain estimator: every decision weighted by the whole
/// sequence log-likelihood.
pub fn plain_coef(t: &MaskTerms) -> Vec<f64> {
    let f = t.lm_total();
    (0..t.lm.len()).map(|i| if i == 0 { 0.0 } else { f }).collect()
}

/// Returns of each decision under the early-exit baseline and discount.
pub fn returns(t: &MaskTerms, gamma: f64) -> Vec<f64> {
    let r = objective::rewards(&t.lm, &t.early).unwrap();
    objective::decision_returns(&r, gamma)
}

/// Index of `mask` in [`enumerate`] order.
pub fn mask_index(mask: &[bool]) -> usize {
    mask.iter().skip(1).enumerate().map(|(k, &a)| (a as usize) << k).sum()
}

//! One training batch: forward every row, turn the sampled boundaries into
//! advantages, and sum the gradients of the full objective.
//!
//! Rewards depend on the whole batch (advantages are centered across rows and
//! the rate loss uses the batch mean probability), so rows are processed in
//! two passes. The first samples masks and records log-likelihoods; the
//! second builds each row's loss and backpropagates. With `micro_batch`
//! smaller than the batch, first-pass graphs are dropped and the second pass
//! re-runs each row with its mask frozen, which reproduces the same values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ByteBatch;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model};
use crate::objective::{self, LossReport, LossWeights};
use crate::params::Bound;
use crate::policy::{BoundarySource, Mode};
use crate::rng::{stream, Purpose};
use crate::tensor::{Graph, Var};

/// How boundaries are chosen during training.
#[derive(Clone, Copy, Debug)]
pub enum Boundaries<'a> {
    /// Sampled from the policy, which is trained with the score-function loss.
    Learned,
    /// The same fixed mask for every row; policy losses are dropped.
    Fixed(&'a [bool]),
}

/// A row's forward graph and the log-probabilities of its targets.
pub struct RowPass {
    pub graph: Graph,
    pub bound: Bound,
    pub trace: ForwardTrace,
    pub lm_logprobs: Var,
    pub early_logprobs: Var,
}

impl RowPass {
    pub fn run<R: Rng>(
        model: &Model,
        ids: &[u32],
        targets: &[u32],
        source: BoundarySource<'_, R>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let bound = if track_grads {
            model.params().bind(&mut graph)
        } else {
            model.params().bind_frozen(&mut graph)
        };
        let trace = model.forward(&mut graph, &bound, ids, source, mode)?;
        let m = trace.boundary.num_tokens();
        if graph.value(trace.x_tok).shape()[0] != m || graph.value(trace.y_tok).shape()[0] != m {
            return Err(Error::shape("downsample", format!("token rows differ from the {m} boundaries")));
        }
        let lm_logprobs = objective::target_logprobs(&mut graph, trace.lm_logits, targets)?;
        let early_logprobs = objective::target_logprobs(&mut graph, trace.early_logits, targets)?;
        Ok(Self {
            graph,
            bound,
            trace,
            lm_logprobs,
            early_logprobs,
        })
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.graph.value(v).data()
    }
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Summed gradient per parameter, in store order.
    pub grads: Vec<Vec<f64>>,
    pub report: LossReport,
    /// Mean boundary probability over free decisions of the batch.
    pub mean_prob: f64,
    /// Mean of `M / N` over rows.
    pub rate: f64,
    pub masks: Vec<Vec<bool>>,
}

struct RowStats {
    mask: Vec<bool>,
    lm: Vec<f64>,
    early: Vec<f64>,
    prob_sum: f64,
}

/// Gradients of the batch objective at the current parameters. Boundary
/// draws for row `b` come from stream `(seed, step, b)`.
pub fn batch_gradients(
    model: &Model,
    batch: &ByteBatch,
    boundaries: Boundaries<'_>,
    seed: u64,
    step: u64,
    micro_batch: usize,
) -> Result<BatchOutput> {
    let rows = batch.batch_size();
    let cfg = model.config();
    let learned = matches!(boundaries, Boundaries::Learned);
    if learned && rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    let keep = micro_batch >= rows;

    let mut kept = Vec::new();
    let mut stats = Vec::with_capacity(rows);
    for b in 0..rows {
        let mut rng = stream(seed, Purpose::Boundary, step, b as u64);
        let source = match boundaries {
            Boundaries::Learned => BoundarySource::Sample(&mut rng),
            Boundaries::Fixed(mask) => BoundarySource::Fixed(mask),
        };
        let pass = RowPass::run(model, batch.input(b), &batch.targets[b], source, Mode::Train, true)?;
        stats.push(RowStats {
            mask: pass.trace.boundary.mask.clone(),
            lm: pass.values(pass.lm_logprobs).to_vec(),
            early: pass.values(pass.early_logprobs).to_vec(),
            prob_sum: pass.values(pass.trace.boundary.probs)[1..].iter().sum(),
        });
        if keep {
            kept.push(Some(pass));
        }
    }

    let n = batch.seq_len();
    let free = rows * (n - 1).max(1);
    let mean_prob = stats.iter().map(|s| s.prob_sum).sum::<f64>() / free as f64;
    let advantages = if learned {
        let returns: Vec<Vec<f64>> = stats
            .iter()
            .map(|s| objective::rewards(&s.lm, &s.early).map(|r| objective::decision_returns(&r, cfg.gamma)))
            .collect::<Result<_>>()?;
        objective::batch_advantages(&returns)?
    } else {
        vec![vec![0.0; n]; rows]
    };
    let weights = LossWeights {
        pi: if learned { cfg.lambda_pi } else { 0.0 },
        target: if learned { cfg.lambda_target } else { 0.0 },
        early: cfg.lambda_early,
    };

    let store = model.params();
    let mut grads: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut report = LossReport::default();
    for b in 0..rows {
        let mut pass = match kept.get_mut(b).and_then(Option::take) {
            Some(p) => p,
            None => RowPass::run::<ChaCha8Rng>(
                model,
                batch.input(b),
                &batch.targets[b],
                BoundarySource::Fixed(&stats[b].mask),
                Mode::Train,
                true,
            )?,
        };
        let g = &mut pass.graph;
        let auto = objective::nll(g, pass.lm_logprobs);
        let early = objective::nll(g, pass.early_logprobs);
        let pi = objective::policy_loss(g, pass.trace.boundary.log_pi, &advantages[b])?;
        let target = objective::target_loss(g, pass.trace.boundary.logits, mean_prob, cfg.target_rate, free)?;
        let total = objective::total_loss(g, auto, pi, target, early, &weights)?;
        g.backward(total)?;
        report.accumulate(&LossReport {
            auto: g.value(auto).item(),
            early: g.value(early).item(),
            pi: g.value(pi).item(),
            target: g.value(target).item(),
            total: g.value(total).item(),
            bytes: n,
        });
        for (acc, row) in grads.iter_mut().zip(pass.bound.grads(g, store)) {
            for (a, r) in acc.iter_mut().zip(row) {
                *a += r;
            }
        }
    }

    let rate = stats
        .iter()
        .map(|s| s.mask.iter().filter(|&&a| a).count() as f64 / n as f64)
        .sum::<f64>()
        / rows as f64;
    Ok(BatchOutput {
        grads,
        report,
        mean_prob,
        rate,
        masks: stats.into_iter().map(|s| s.mask).collect(),
    })
}

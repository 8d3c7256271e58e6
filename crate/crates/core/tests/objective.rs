mod common;

use common::estimator::{self, enumerate, exact_gradient, plain_coef, returns, toy_model, toy_row};
use common::{check_store, rng, tiny_model, uniform};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scoretok::batch::RowPass;
use scoretok::objective::{self, LossWeights};
use scoretok::policy::{BoundarySource, Mode};
use scoretok::{Graph, Tensor};

fn naive_returns(r: &[f64], gamma: f64) -> Vec<f64> {
    let n = r.len();
    (0..n)
        .map(|i| (0..n.saturating_sub(i + 1)).map(|j| gamma.powi(j as i32) * r[i + j + 1]).sum())
        .collect()
}

#[test]
fn reverse_scan_matches_double_loop() {
    let mut r = rng(1);
    let rewards: Vec<f64> = (0..64).map(|_| r.gen_range(-3.0..3.0)).collect();
    let fast = objective::discounted_returns(&rewards, 0.99);
    let slow = naive_returns(&rewards, 0.99);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(fast[63], 0.0);
    assert_eq!(objective::discounted_returns(&[9.0, 1.0, 1.0, 1.0], 0.5)[0], 1.75);
    assert_eq!(objective::discounted_returns(&[5.0, 1.0, 2.0, 3.0], 0.0), vec![1.0, 2.0, 3.0, 0.0]);
}

#[test]
fn decision_returns_include_own_prediction() {
    let r = [1.0, 1.0, 1.0];
    assert_eq!(objective::decision_returns(&r, 0.5), vec![1.75, 1.5, 1.0]);
}

#[test]
fn advantage_columns_sum_to_zero() {
    let mut r = rng(2);
    let g: Vec<Vec<f64>> = (0..8).map(|_| (0..32).map(|_| r.gen_range(-50.0..50.0)).collect()).collect();
    let a = objective::batch_advantages(&g).unwrap();
    for i in 0..32 {
        assert!(a.iter().map(|row| row[i]).sum::<f64>().abs() < 1e-12);
    }
    let a = objective::batch_advantages(&[vec![3.0], vec![1.0]]).unwrap();
    assert_eq!(a, vec![vec![1.0], vec![-1.0]]);
    assert!(objective::batch_advantages(&[vec![1.0]]).is_err());
}

proptest! {
    #[test]
    fn advantages_ignore_per_position_shifts(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 6), 2..6),
        shift in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, s)| a + s).collect()).collect();
        let a = objective::batch_advantages(&rows).unwrap();
        let b = objective::batch_advantages(&shifted).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn returns_are_linear_in_rewards(
        r1 in prop::collection::vec(-5.0f64..5.0, 1..20),
        k in -3.0f64..3.0,
        gamma in 0.0f64..1.0,
    ) {
        let r2: Vec<f64> = r1.iter().rev().cloned().collect();
        let mix: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| a + k * b).collect();
        let g1 = objective::decision_returns(&r1, gamma);
        let g2 = objective::decision_returns(&r2, gamma);
        let gm = objective::decision_returns(&mix, gamma);
        for i in 0..r1.len() {
            prop_assert!((gm[i] - g1[i] - k * g2[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn policy_loss_sign_and_zero() {
    let mut g = Graph::new();
    let lp = g.param(Tensor::vector(vec![0.0, -0.5, -1.2]));
    let zero = objective::policy_loss(&mut g, lp, &[0.0; 3]).unwrap();
    g.backward(zero).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    assert!(g.grad(lp).unwrap().iter().all(|&x| x == 0.0));

    let mut g = Graph::new();
    let lp = g.param(Tensor::vector(vec![0.0, -0.5, -1.2]));
    let loss = objective::policy_loss(&mut g, lp, &[5.0, 1.0, 0.0]).unwrap();
    g.backward(loss).unwrap();
    // Descent raises the log-probability of the rewarded decision; the forced
    // first position is ignored.
    assert_eq!(g.grad(lp).unwrap(), &[0.0, -1.0, 0.0]);
    assert!(objective::policy_loss(&mut g, lp, &[1.0]).is_err());
}

#[test]
fn target_loss_pushes_every_logit_equally() {
    let mut r = rng(3);
    for (p_mean, sign) in [(0.35, 1.0), (0.1, -1.0), (0.2, 0.0)] {
        let mut g = Graph::new();
        let logits = g.param(uniform(&mut r, &[9], -20.0, 20.0));
        let loss = objective::target_loss(&mut g, logits, p_mean, 0.2, 24).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap().to_vec();
        let want = (p_mean - 0.2) / 24.0;
        assert_eq!(grad[0], 0.0);
        for &x in &grad[1..] {
            assert_eq!(x, want);
            assert_eq!(x.signum() * (x != 0.0) as i32 as f64, sign);
        }
    }
}

#[test]
fn uniform_logits_cost_ln_vocab() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![5, 258]));
    let lp = objective::target_logprobs(&mut g, logits, &[0, 17, 255, 256, 257]).unwrap();
    let nll = objective::nll(&mut g, lp);
    let per_byte = g.value(nll).item() / 5.0;
    assert!((per_byte - 258f64.ln()).abs() < 1e-12);
    assert!((per_byte - 5.553).abs() < 5e-4);
    let bpb = objective::bits_per_byte(g.value(nll).item(), 5);
    assert!((bpb - 258f64.log2()).abs() < 1e-12);
    assert!((bpb - 8.01).abs() < 5e-3);
    assert!(objective::target_logprobs(&mut g, logits, &[0, 1, 2, 3, 258]).is_err());
    assert!(objective::target_logprobs(&mut g, logits, &[0]).is_err());
}

#[test]
fn saturated_logits_keep_loss_positive() {
    let model = tiny_model(4, 1.0);
    let mut t = Tensor::zeros(vec![1, 258]);
    t.data_mut()[7] = 1e6;
    let mut g = Graph::new();
    let logits = g.constant(t);
    let capped = scoretok::nn::softcap(&mut g, logits, model.config().softcap);
    let lp = objective::target_logprobs(&mut g, capped, &[7]).unwrap();
    let loss = -g.value(lp).item();
    let bound = (1.0 + 257.0 * (-30f64).exp()).ln();
    assert!(loss > 0.0 && (loss - bound).abs() < 1e-13, "{loss} vs {bound}");
}

#[test]
fn total_loss_weights_components() {
    let mut g = Graph::new();
    let [a, p, t, e] = [2.0, 3.0, 5.0, 7.0].map(|x| g.constant(Tensor::scalar(x)));
    let w = LossWeights {
        pi: 0.5,
        target: 0.25,
        early: 0.1,
    };
    let total = objective::total_loss(&mut g, a, p, t, e, &w).unwrap();
    assert!((g.value(total).item() - (2.0 + 1.5 + 1.25 + 0.7)).abs() < 1e-15);
    let off = LossWeights {
        pi: 0.0,
        target: 0.0,
        early: 0.0,
    };
    let total = objective::total_loss(&mut g, a, p, t, e, &off).unwrap();
    assert_eq!(g.value(total).item(), 2.0);
}

#[test]
fn advantages_reach_no_parameter_outside_the_policy_path() {
    // The policy loss alone must leave every head and the backbone untouched:
    // rewards enter as constants.
    let model = tiny_model(5, 2.0);
    let ids = common::random_ids(6, 8);
    let targets = common::random_ids(7, 9)[1..].to_vec();
    let mut pass = RowPass::run(&model, &ids, &targets, BoundarySource::Sample(&mut rng(8)), Mode::Train, true).unwrap();
    let r = objective::rewards(pass.values(pass.lm_logprobs), pass.values(pass.early_logprobs)).unwrap();
    let g_ret = objective::decision_returns(&r, 0.99);
    let g = &mut pass.graph;
    let loss = objective::policy_loss(g, pass.trace.boundary.log_pi, &g_ret).unwrap();
    g.backward(loss).unwrap();
    let grads = pass.bound.grads(g, model.params());
    for (name, grad) in model.params().iter().map(|(n, _)| n).zip(&grads) {
        let live = name == "policy" || name == "embed" || name.starts_with("down.");
        if !live {
            assert!(grad.iter().all(|&x| x == 0.0), "{name}");
        }
    }
    assert!(grads[model.policy_param().index()].iter().any(|&x| x != 0.0));
}

#[test]
fn enumerated_objective_matches_finite_differences() {
    let model = toy_model(10, 6.0);
    let (ids, targets) = toy_row(b"ab cd ");
    let report = check_store(model.params(), |g, p| estimator::expected_loglik(g, p, &model, &ids, &targets));
    // 32 forward passes per evaluation: central differences lose a few more
    // digits on the smallest coordinates than a single pass does.
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn expectation(terms: &[estimator::MaskTerms], f: impl Fn(&estimator::MaskTerms) -> Vec<f64>) -> Vec<f64> {
    let mut out = vec![0.0; terms[0].cond.len()];
    for t in terms {
        for (o, v) in out.iter_mut().zip(f(t)) {
            *o += t.prob * v;
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn score_function_estimators_are_exactly_unbiased() {
    let model = toy_model(11, 6.0);
    let (ids, targets) = toy_row(b"xy zw ");
    let terms = enumerate(&model, &ids, &targets);
    assert!((terms.iter().map(|t| t.prob).sum::<f64>() - 1.0).abs() < 1e-12);
    let exact = exact_gradient(&model, &ids, &targets);
    let scale = exact.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let plain = expectation(&terms, |t| t.estimate(&plain_coef(t), true));
    assert!(max_abs_diff(&plain, &exact) < 1e-10 * scale.max(1.0));

    // Only future rewards, minus the early-exit prediction: still unbiased
    // without discounting.
    let causal = expectation(&terms, |t| t.estimate(&returns(t, 1.0), true));
    assert!(max_abs_diff(&causal, &exact) < 1e-10 * scale.max(1.0));

    // Discounting trades a little bias for variance.
    let discounted = expectation(&terms, |t| t.estimate(&returns(t, 0.99), true));
    assert!(max_abs_diff(&discounted, &exact) > 1e-8);
}

#[test]
fn batch_centering_shrinks_policy_term_by_batch_factor() {
    // With B = 2 the batch mean includes the row's own return, so the
    // expected policy term is (B - 1) / B = 1/2 of the unbiased one.
    let model = toy_model(12, 6.0);
    let (ids, targets) = toy_row(b"pq rs ");
    let terms = enumerate(&model, &ids, &targets);
    let unbiased = expectation(&terms, |t| t.estimate(&returns(t, 1.0), false));
    let mut centered = vec![0.0; unbiased.len()];
    for t in &terms {
        for u in &terms {
            let g = [returns(t, 1.0), returns(u, 1.0)];
            let a = objective::batch_advantages(&g).unwrap();
            for (c, v) in centered.iter_mut().zip(t.estimate(&a[0], false)) {
                *c += t.prob * u.prob * v;
            }
        }
    }
    let half: Vec<f64> = unbiased.iter().map(|x| 0.5 * x).collect();
    let scale = unbiased.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(scale > 1e-3);
    assert!(max_abs_diff(&centered, &half) < 1e-10 * scale);
}

#[test]
fn sampler_draws_masks_at_their_enumerated_probabilities() {
    let model = toy_model(13, 6.0);
    let (ids, targets) = toy_row(b"ab ab ");
    let terms = enumerate(&model, &ids, &targets);
    let draws = 20_000;
    let mut counts = vec![0usize; terms.len()];
    let mut r: ChaCha8Rng = rng(14);
    for _ in 0..draws {
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let x = model.encode(&mut g, &p, &ids).unwrap();
        let b = model.boundaries(&mut g, &p, x, BoundarySource::Sample(&mut r), Mode::Train).unwrap();
        counts[estimator::mask_index(&b.mask)] += 1;
    }
    // Pearson chi-square with 31 degrees of freedom; 61.1 is the 0.001 tail.
    let chi2: f64 = terms
        .iter()
        .zip(&counts)
        .map(|(t, &c)| {
            let e = t.prob * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    assert!(chi2 < 61.1, "chi2 = {chi2}");
}

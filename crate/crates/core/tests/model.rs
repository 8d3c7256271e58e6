mod common;

use common::{check_store, contract, random_ids, rng, rows_equal, tiny_model, uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scoretok::model::{downsample, token_index, token_starts, upsample};
use scoretok::objective::{self, LossWeights};
use scoretok::params::ParamStore;
use scoretok::policy::{uniform_baseline_mask, BoundarySource, Mode};
use scoretok::{Error, Graph, Model, ModelConfig, Tensor};

fn index_rows(n: usize, d: usize) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|k| (k / d) as f64).collect()).unwrap()
}

fn mask(bits: &str) -> Vec<bool> {
    bits.chars().map(|c| c == '1').collect()
}

#[test]
fn downsample_selects_boundary_rows() {
    let mut g = Graph::new();
    let x = g.constant(index_rows(8, 3));
    let m = mask("11001010");
    let sel = downsample(&mut g, x, &m).unwrap();
    let sel = g.value(sel);
    assert_eq!(sel.shape(), &[4, 3]);
    let rows: Vec<f64> = (0..4).map(|j| sel.row(j)[0]).collect();
    assert_eq!(rows, vec![0.0, 1.0, 4.0, 6.0]);
    assert_eq!(token_starts(&m), vec![0, 1, 4, 6]);

    let all = downsample(&mut g, x, &[true; 8]).unwrap();
    assert_eq!(g.value(all), g.value(x));
    let one = downsample(&mut g, x, &mask("10000000")).unwrap();
    assert_eq!(g.value(one).shape(), &[1, 3]);
    assert_eq!(g.value(one).row(0), g.value(x).row(0));
    assert!(matches!(downsample(&mut g, x, &[false; 8]), Err(Error::EmptyMask)));
}

#[test]
fn upsample_follows_token_index_oracle() {
    let m = mask("11001010");
    // Independent scan: the token of byte j is the last boundary at or before j.
    let mut oracle = Vec::new();
    let starts = token_starts(&m);
    for j in 0..8 {
        oracle.push(starts.iter().rposition(|&s| s <= j).unwrap());
    }
    assert_eq!(token_index(&m).unwrap(), oracle);
    assert_eq!(oracle, vec![0, 1, 1, 1, 2, 2, 3, 3]);

    let mut r = rng(1);
    let xt = uniform(&mut r, &[8, 4], -1.0, 1.0);
    let yt = uniform(&mut r, &[4, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (x, y) = (g.constant(xt.clone()), g.constant(yt.clone()));
    let out = upsample(&mut g, y, x, &m).unwrap();
    for j in 0..8 {
        for c in 0..4 {
            assert_eq!(g.value(out).row(j)[c], xt.row(j)[c] + yt.row(oracle[j])[c]);
        }
    }

    // One token per byte, and one token for everything.
    let y8 = g.constant(uniform(&mut r, &[8, 4], -1.0, 1.0));
    let each = upsample(&mut g, y8, x, &[true; 8]).unwrap();
    let sum = g.add(x, y8).unwrap();
    assert_eq!(g.value(each), g.value(sum));
    let y1 = g.constant(uniform(&mut r, &[1, 4], -1.0, 1.0));
    let bcast = upsample(&mut g, y1, x, &mask("10000000")).unwrap();
    for j in 0..8 {
        for c in 0..4 {
            assert_eq!(g.value(bcast).row(j)[c], xt.row(j)[c] + g.value(y1).row(0)[c]);
        }
    }

    assert!(upsample(&mut g, y, x, &mask("11101010")).is_err());
    assert!(upsample(&mut g, y, x, &mask("1100101")).is_err());
    assert!(upsample(&mut g, y, x, &mask("01101010")).is_err());
}

#[test]
fn encode_shapes_and_errors() {
    let model = tiny_model(1, 1.0);
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let x = model.encode(&mut g, &p, &[256]).unwrap();
    assert_eq!(g.value(x).shape(), &[1, 8]);
    assert!(matches!(
        model.encode(&mut g, &p, &[256, 300]),
        Err(Error::TokenOutOfRange { id: 300, vocab: 258 })
    ));
}

#[test]
fn token_count_matches_mask_on_every_forward() {
    let model = tiny_model(2, 3.0);
    for seed in 0..20 {
        let ids = random_ids(seed, 12);
        let mut r = rng(seed + 100);
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let t = model.forward(&mut g, &p, &ids, BoundarySource::Sample(&mut r), Mode::Train).unwrap();
        let m = t.boundary.mask.iter().filter(|&&a| a).count();
        assert_eq!(t.num_tokens(), m);
        assert_eq!(g.value(t.x_tok).shape()[0], m);
        assert_eq!(g.value(t.y_tok).shape()[0], m);
        assert!(m >= 1 && m <= 12);
        assert_eq!(g.value(t.lm_logits).shape(), &[12, 258]);
        assert_eq!(g.value(t.early_logits).shape(), &[12, 258]);
    }
}

#[test]
fn uniform_mask_over_full_length_sequence() {
    // BOS plus 4095 content bytes gives 4096 positions.
    let model = Model::new(ModelConfig::tiny(), 3).unwrap();
    let ids = random_ids(4, 4096);
    let m = uniform_baseline_mask(4096, 0.2);
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let t = model.forward::<ChaCha8Rng>(&mut g, &p, &ids, BoundarySource::Fixed(&m), Mode::Eval).unwrap();
    assert_eq!(t.num_tokens(), 819);
    assert_eq!(g.value(t.x_tok).shape(), &[819, 8]);
}

struct Outputs {
    lm: Tensor,
    early: Tensor,
    boundary: Tensor,
    mask: Vec<bool>,
}

fn run(model: &Model, ids: &[u32], source: BoundarySource<'_, ChaCha8Rng>) -> Outputs {
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let t = model.forward(&mut g, &p, ids, source, Mode::Train).unwrap();
    Outputs {
        lm: g.value(t.lm_logits).clone(),
        early: g.value(t.early_logits).clone(),
        boundary: g.value(t.boundary.logits).clone(),
        mask: t.boundary.mask,
    }
}

#[test]
fn perturbing_a_byte_leaves_earlier_outputs_unchanged() {
    let model = tiny_model(5, 3.0);
    let mut r = rng(6);
    for trial in 0..10 {
        let ids = random_ids(trial, 14);
        let k = r.gen_range(1..14);
        let mut pert = ids.clone();
        pert[k] = (pert[k] + 1 + r.gen_range(0..200)) % 256;
        let fixed: Vec<bool> = (0..14).map(|i| i == 0 || r.gen_bool(0.4)).collect();
        let a = run(&model, &ids, BoundarySource::Fixed(&fixed));
        let b = run(&model, &pert, BoundarySource::Fixed(&fixed));
        assert!(rows_equal(&a.lm, &b.lm, 0..k));
        assert!(rows_equal(&a.early, &b.early, 0..k));
        assert_eq!(&a.boundary.data()[..k], &b.boundary.data()[..k]);
        assert_ne!(a.early.row(k), b.early.row(k));

        let seed = 1000 + trial;
        let a = run(&model, &ids, BoundarySource::Sample(&mut rng(seed)));
        let b = run(&model, &pert, BoundarySource::Sample(&mut rng(seed)));
        assert_eq!(&a.mask[..k], &b.mask[..k]);
        assert!(rows_equal(&a.lm, &b.lm, 0..k));
        assert_eq!(&a.boundary.data()[..k], &b.boundary.data()[..k]);
    }
}

#[test]
fn backbone_is_causal_over_tokens() {
    let model = tiny_model(7, 1.0);
    let mut r = rng(8);
    let xt = uniform(&mut r, &[5, 8], -1.0, 1.0);
    let run_mid = |x: &Tensor| {
        let mut g = Graph::new();
        let p = model.params().bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let y = model.mid(&mut g, &p, xv).unwrap();
        g.value(y).clone()
    };
    let base = run_mid(&xt);
    for k in 0..5 {
        let mut pert = xt.clone();
        pert.data_mut()[k * 8] += 0.5;
        assert!(rows_equal(&base, &run_mid(&pert), 0..k));
    }
    let one = uniform(&mut r, &[1, 8], -1.0, 1.0);
    assert_eq!(run_mid(&one).shape(), &[1, 8]);
}

#[test]
fn early_head_starts_as_output_head() {
    let model = Model::new(ModelConfig::tiny(), 9).unwrap();
    let params = model.params();
    assert_eq!(params.get(model.early_unembed_param()), params.get(model.unembed_param()));
    let ids = random_ids(10, 9);
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = model.encode(&mut g, &p, &ids).unwrap();
    let early = model.early_exit_logits(&mut g, &p, x).unwrap();
    // The output head's final norm and unembedding applied straight to X.
    let gain = p[params.id("final_norm").unwrap()];
    let h = scoretok::nn::rmsnorm(&mut g, x, gain).unwrap();
    let direct = g.matmul(h, p[model.unembed_param()]).unwrap();
    let direct = scoretok::nn::softcap(&mut g, direct, 30.0);
    assert_eq!(g.value(early), g.value(direct));

    let probs = g.softmax(early).unwrap();
    for i in 0..9 {
        assert!((g.value(probs).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn encoder_stack_matches_finite_differences() {
    let config = ModelConfig {
        n_down_layers: 2,
        ..ModelConfig::tiny()
    };
    let model = Model::new(config, 11).unwrap();
    let ids = random_ids(12, 5);
    let report = check_store(model.params(), |g, p| {
        let x = model.encode(g, p, &ids)?;
        contract(g, x, 13)
    });
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn full_model_matches_finite_differences_with_frozen_mask() {
    let model = tiny_model(14, 2.0);
    let ids = random_ids(15, 7);
    let targets: Vec<u32> = random_ids(16, 8)[1..].to_vec();
    let frozen = vec![true, false, true, true, false, false, true];
    let advantages = [0.0, 0.7, -1.2, 0.4, 2.0, -0.3, 0.9];
    let weights = LossWeights {
        pi: 0.5,
        target: 0.8,
        early: 0.3,
    };
    let report = check_store(model.params(), |g, p| {
        let t = model.forward::<ChaCha8Rng>(g, p, &ids, BoundarySource::Fixed(&frozen), Mode::Train)?;
        let lm = objective::target_logprobs(g, t.lm_logits, &targets)?;
        let early = objective::target_logprobs(g, t.early_logits, &targets)?;
        let auto = objective::nll(g, lm);
        let early = objective::nll(g, early);
        let pi = objective::policy_loss(g, t.boundary.log_pi, &advantages)?;
        let target = objective::target_loss(g, t.boundary.logits, 0.35, 0.2, 6)?;
        objective::total_loss(g, auto, pi, target, early, &weights)
    });
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn from_params_checks_layout() {
    let model = Model::new(ModelConfig::tiny(), 17).unwrap();
    let again = Model::from_params(ModelConfig::tiny(), model.params().clone()).unwrap();
    assert_eq!(again.params(), model.params());
    let mut wrong = ParamStore::new();
    for (name, t) in model.params().iter() {
        let t = if name == "policy" { Tensor::zeros(vec![8, 2]) } else { t.clone() };
        wrong.add(name, t);
    }
    assert!(Model::from_params(ModelConfig::tiny(), wrong).is_err());
    assert!(Model::new(ModelConfig { vocab_size: 256, ..ModelConfig::tiny() }, 0).is_err());
    assert!(Model::new(ModelConfig { target_rate: 1.0, ..ModelConfig::tiny() }, 0).is_err());
}

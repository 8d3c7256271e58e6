#![allow(dead_code)]

pub mod estimator;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scoretok::params::{Bound, ParamStore};
use scoretok::tensor::check::{relative_error, FD_STEP};
use scoretok::{Graph, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(out * W)` for a fixed random `W`.
pub fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(uniform(&mut rng(seed), &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

#[derive(Debug)]
pub struct StoreCheck {
    pub max_rel_err: f64,
    pub worst: (String, usize, f64, f64),
    pub coordinates: usize,
}

/// Reverse-mode gradients of a scalar built over every parameter of `store`
/// against central differences, coordinate by coordinate.
pub fn check_store<F>(store: &ParamStore, build: F) -> StoreCheck
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = build(&mut g, &bound).unwrap();
    g.backward(loss).unwrap();
    let analytic = bound.grads(&g, store);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let b = s.bind_frozen(&mut g);
        let loss = build(&mut g, &b).unwrap();
        g.value(loss).item()
    };
    let mut probe = store.clone();
    let mut out = StoreCheck {
        max_rel_err: 0.0,
        worst: (String::new(), 0, 0.0, 0.0),
        coordinates: 0,
    };
    for id in store.ids() {
        for c in 0..store.get(id).numel() {
            let x0 = store.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = x0 + FD_STEP;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[c] = x0 - FD_STEP;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[c] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[id.index()][c];
            let err = relative_error(a, numeric);
            out.coordinates += 1;
            if err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = (store.name(id).to_string(), c, a, numeric);
            }
        }
    }
    out
}

/// Row-major equality of two row ranges of `[n, d]` tensors.
pub fn rows_equal(a: &Tensor, b: &Tensor, rows: std::ops::Range<usize>) -> bool {
    rows.into_iter().all(|i| a.row(i) == b.row(i))
}

use scoretok::{Model, ModelConfig};

/// Tiny model with non-zero policy projections so every boundary path is live.
pub fn tiny_model(seed: u64, policy_scale: f64) -> Model {
    let mut model = Model::new(ModelConfig::tiny(), seed).unwrap();
    let id = model.policy_param();
    let shape = model.params().get(id).shape().to_vec();
    *model.params_mut().get_mut(id) = uniform(&mut rng(seed ^ 0xabc), &shape, -policy_scale, policy_scale);
    model
}

/// Random content bytes behind a BOS.
pub fn random_ids(seed: u64, n: usize) -> Vec<u32> {
    let mut r = rng(seed);
    let mut ids = vec![scoretok::data::BOS];
    ids.extend((1..n).map(|_| r.gen_range(0..256u32)));
    ids
}

/// Every mask of length `n` with a forced first boundary.
pub fn all_masks(n: usize) -> Vec<Vec<bool>> {
    (0..1usize << (n - 1))
        .map(|bits| (0..n).map(|i| i == 0 || bits >> (i - 1) & 1 == 1).collect())
        .collect()
}

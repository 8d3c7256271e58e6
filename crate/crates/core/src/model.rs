//! Autoregressive U-net over bytes.
//!
//! ```text
//! ids -> embed -> down (sliding window) -> X ----------------------+
//!                                          |                       |
//!                                policy -> a -> select rows -> X'  |
//!                                          |                       |
//!                                          mid (full causal) -> Y' |
//!                                          |                       v
//!                            Y_j = X_j + Y'_{t(j)} <---------------+
//!                                          |
//!                    up (sliding window) -> norm -> unembed -> softcap
//! ```
//!
//! `a_j = 1` means byte `j` starts a token and `t(j) = (sum_{k<=j} a_k) - 1`.
//! Position 0 is always a boundary so every byte belongs to a token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionWindow, DecoderLayerConfig, DecoderStack};
use crate::params::{normal_matrix, Bound, ParamId, ParamStore};
use crate::policy::{self, BoundarySource, BoundaryTrace, Mode, PolicyConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub num_heads: usize,
    pub n_down_layers: usize,
    pub n_mid_layers: usize,
    pub n_up_layers: usize,
    /// Sliding attention window of the byte-level layers.
    pub byte_window: usize,
    pub vocab_size: usize,
    /// Content bytes per training sequence (BOS excluded).
    pub seq_len: usize,
    pub policy_window: usize,
    pub logit_scale: f64,
    pub target_rate: f64,
    /// Cap for both the boundary logits (training only) and the byte logits.
    pub softcap: f64,
    pub gamma: f64,
    pub lambda_pi: f64,
    pub lambda_target: f64,
    pub lambda_early: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            num_heads: 4,
            n_down_layers: 2,
            n_mid_layers: 2,
            n_up_layers: 2,
            byte_window: 64,
            vocab_size: 258,
            seq_len: 256,
            policy_window: 8,
            logit_scale: 16.0,
            target_rate: 0.2,
            softcap: 30.0,
            gamma: 0.99,
            lambda_pi: 1e-2,
            lambda_target: 1e-2,
            lambda_early: 0.1,
            rope_base: 1e4,
        }
    }
}

impl ModelConfig {
    /// Small model used by gradient, causality and estimator tests.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 8,
            num_heads: 2,
            n_down_layers: 1,
            n_mid_layers: 1,
            n_up_layers: 1,
            byte_window: 4,
            seq_len: 16,
            policy_window: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 257 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for BOS after 256 bytes",
                self.vocab_size
            )));
        }
        if self.seq_len == 0 || self.byte_window == 0 {
            return Err(Error::Config("seq_len and byte_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (name, v) in [
            ("lambda_pi", self.lambda_pi),
            ("lambda_target", self.lambda_target),
            ("lambda_early", self.lambda_early),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        self.policy().validate()?;
        self.byte_layer().validate()?;
        self.token_layer().validate()
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            window: self.policy_window,
            logit_scale: self.logit_scale,
            target_rate: self.target_rate,
            softcap: self.softcap,
        }
    }

    pub fn byte_layer(&self) -> DecoderLayerConfig {
        DecoderLayerConfig {
            embedding_dim: self.embedding_dim,
            num_heads: self.num_heads,
            mlp_hidden: self.embedding_dim,
            attention_window: AttentionWindow::Sliding(self.byte_window),
            rope_base: self.rope_base,
        }
    }

    pub fn token_layer(&self) -> DecoderLayerConfig {
        DecoderLayerConfig {
            mlp_hidden: 4 * self.embedding_dim,
            attention_window: AttentionWindow::Full,
            ..self.byte_layer()
        }
    }
}

/// Everything one forward pass records for the objective.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `[n, d]` byte encodings.
    pub x: Var,
    pub boundary: BoundaryTrace,
    /// `[m, d]` selected token inputs.
    pub x_tok: Var,
    /// `[m, d]` backbone outputs.
    pub y_tok: Var,
    /// `[n, d]` upsampled byte states.
    pub y: Var,
    /// `[n, vocab]`; row `i` predicts the byte after input position `i`.
    pub lm_logits: Var,
    /// `[n, vocab]`; row `i` predicts the same byte from `X_i` alone.
    pub early_logits: Var,
}

impl ForwardTrace {
    pub fn num_tokens(&self) -> usize {
        self.boundary.num_tokens()
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    down: DecoderStack,
    policy: ParamId,
    mid: DecoderStack,
    up: DecoderStack,
    final_norm: ParamId,
    unembed: ParamId,
    early_norm: ParamId,
    early_unembed: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&config, &mut rng)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Model over existing parameters, which must match the layout of
    /// `config` name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((want, wt), (got, gt)) in template.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {got} {:?} does not match expected {want} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn policy_param(&self) -> ParamId {
        self.layout.policy
    }

    pub fn unembed_param(&self) -> ParamId {
        self.layout.unembed
    }

    pub fn early_unembed_param(&self) -> ParamId {
        self.layout.early_unembed
    }

    /// Matrix parameters applied once per byte: byte-level layers, policy
    /// projections and both unembeddings.
    pub fn byte_matrix_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids = l.down.matrix_params();
        ids.extend(l.up.matrix_params());
        ids.extend([l.policy, l.unembed, l.early_unembed]);
        ids
    }

    /// Matrix parameters applied once per token: the backbone layers.
    pub fn token_matrix_params(&self) -> Vec<ParamId> {
        self.layout.mid.matrix_params()
    }

    /// Embedding lookup followed by the byte-level encoder stack.
    pub fn encode(&self, g: &mut Graph, p: &Bound, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::shape("encode", "empty input"));
        }
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            rows.push(id as usize);
        }
        let x = g.embedding(p[self.layout.embed], &rows)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.layout.down.forward(g, p, x, &positions)
    }

    /// Boundary decisions for the encodings `x`, with their graph nodes.
    pub fn boundaries<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        source: BoundarySource<'_, R>,
        mode: Mode,
    ) -> Result<BoundaryTrace> {
        let proj = g.matmul(x, p[self.layout.policy])?;
        let cfg = self.config.policy();
        let mask = policy::sample_boundaries(g.value(proj), &cfg, mode, source)?;
        policy::boundary_graph(g, proj, &mask, &cfg, mode)
    }

    /// Token-level backbone over `m` selected rows.
    pub fn mid(&self, g: &mut Graph, p: &Bound, x_tok: Var) -> Result<Var> {
        let m = g.value(x_tok).shape()[0];
        let positions: Vec<usize> = (0..m).collect();
        self.layout.mid.forward(g, p, x_tok, &positions)
    }

    /// Byte-level decoder stack, final norm, unembedding and softcap.
    pub fn decode(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let n = g.value(y).shape()[0];
        let positions: Vec<usize> = (0..n).collect();
        let h = self.layout.up.forward(g, p, y, &positions)?;
        let h = nn::rmsnorm(g, h, p[self.layout.final_norm])?;
        let logits = g.matmul(h, p[self.layout.unembed])?;
        Ok(nn::softcap(g, logits, self.config.softcap))
    }

    /// Next-byte logits read directly off the encodings: row `i` predicts the
    /// byte following input position `i` from `X_i` only.
    pub fn early_exit_logits(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = nn::rmsnorm(g, x, p[self.layout.early_norm])?;
        let logits = g.matmul(h, p[self.layout.early_unembed])?;
        Ok(nn::softcap(g, logits, self.config.softcap))
    }

    /// Full pass over one input row (`BOS` followed by content bytes).
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        p: &Bound,
        ids: &[u32],
        source: BoundarySource<'_, R>,
        mode: Mode,
    ) -> Result<ForwardTrace> {
        let x = self.encode(g, p, ids)?;
        let boundary = self.boundaries(g, p, x, source, mode)?;
        let x_tok = downsample(g, x, &boundary.mask)?;
        let y_tok = self.mid(g, p, x_tok)?;
        let y = upsample(g, y_tok, x, &boundary.mask)?;
        let lm_logits = self.decode(g, p, y)?;
        let early_logits = self.early_exit_logits(g, p, x)?;
        Ok(ForwardTrace {
            x,
            boundary,
            x_tok,
            y_tok,
            y,
            lm_logits,
            early_logits,
        })
    }
}

fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(ParamStore, Layout)> {
    let d = config.embedding_dim;
    let v = config.vocab_size;
    let mut store = ParamStore::new();
    let embed = store.add("embed", normal_matrix(rng, v, d, 1.0));
    let down = DecoderStack::new(&mut store, "down", config.n_down_layers, &config.byte_layer(), rng)?;
    let policy = store.add("policy", Tensor::zeros(vec![d, config.policy_window + 1]));
    let mid = DecoderStack::new(&mut store, "mid", config.n_mid_layers, &config.token_layer(), rng)?;
    let up = DecoderStack::new(&mut store, "up", config.n_up_layers, &config.byte_layer(), rng)?;
    let final_norm = store.add("final_norm", Tensor::filled(vec![d], 1.0));
    let unembed_init = normal_matrix(rng, d, v, 1.0 / (d as f64).sqrt());
    let unembed = store.add("unembed", unembed_init.clone());
    let early_norm = store.add("early_norm", Tensor::filled(vec![d], 1.0));
    let early_unembed = store.add("early_unembed", unembed_init);
    Ok((
        store,
        Layout {
            embed,
            down,
            policy,
            mid,
            up,
            final_norm,
            unembed,
            early_norm,
            early_unembed,
        },
    ))
}

/// Positions of the set bits of `mask`, ascending.
pub fn token_starts(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// `t(j) = (sum_{k<=j} a_k) - 1` for every byte `j`. Requires `mask[0]`.
pub fn token_index(mask: &[bool]) -> Result<Vec<usize>> {
    if mask.first() != Some(&true) {
        return Err(Error::EmptyMask);
    }
    let mut count = 0usize;
    Ok(mask
        .iter()
        .map(|&a| {
            count += a as usize;
            count - 1
        })
        .collect())
}

/// Rows of `x` at the boundary positions.
pub fn downsample(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    let n = g.value(x).shape()[0];
    if mask.len() != n {
        return Err(Error::shape(
            "downsample",
            format!("mask of {} for {n} rows", mask.len()),
        ));
    }
    let starts = token_starts(mask);
    if starts.is_empty() {
        return Err(Error::EmptyMask);
    }
    g.gather_rows(x, &starts)
}

/// `Y_j = X_j + Y'_{t(j)}`.
pub fn upsample(g: &mut Graph, y_tok: Var, x: Var, mask: &[bool]) -> Result<Var> {
    let n = g.value(x).shape()[0];
    let m = g.value(y_tok).shape()[0];
    let t = token_index(mask)?;
    if mask.len() != n || t.last().map(|&l| l + 1) != Some(m) {
        return Err(Error::shape(
            "upsample",
            format!("mask of {} with {} tokens for [{n}] bytes and [{m}] tokens", mask.len(), t.last().map_or(0, |l| l + 1)),
        ));
    }
    let spread = g.gather_rows(y_tok, &t)?;
    g.add(x, spread)
}

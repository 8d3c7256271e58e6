//! Decoder building blocks: RMSNorm, GeGLU MLP, rotary embeddings, masked
//! causal attention and logit softcapping, assembled into a pre- and
//! post-normalized decoder layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;

/// How far back each query may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionWindow {
    /// Query `i` sees `max(0, i - w + 1)..=i`.
    Sliding(usize),
    Full,
}

impl AttentionWindow {
    fn span(self) -> Option<usize> {
        match self {
            AttentionWindow::Sliding(w) => Some(w),
            AttentionWindow::Full => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerConfig {
    pub embedding_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub attention_window: AttentionWindow,
    pub rope_base: f64,
}

impl DecoderLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if self.embedding_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding_dim {} not divisible by num_heads {}",
                self.embedding_dim, self.num_heads
            )));
        }
        if (self.embedding_dim / self.num_heads) % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head dim".into()));
        }
        if self.attention_window == AttentionWindow::Sliding(0) {
            return Err(Error::Config("attention window must be at least 1".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embedding_dim / self.num_heads
    }
}

/// `x / rms(x) * gain` over the last axis.
pub fn rmsnorm(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    let sq = g.square(x);
    let ms = g.mean_last(sq)?;
    let shifted = g.add_scalar(ms, RMS_EPS);
    let inv = g.rsqrt(shifted);
    let normed = g.mul_col_vec(x, inv)?;
    g.mul_row_vec(normed, gain)
}

/// `(gelu(x W_gate) * (x W_up)) W_down`, no biases.
pub fn geglu_mlp(g: &mut Graph, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = g.matmul(x, w_gate)?;
    let gate = g.gelu(gate);
    let up = g.matmul(x, w_up)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w_down)
}

/// Rotary position embedding of `[n, heads * head_dim]` rows at `positions`.
pub fn rope(g: &mut Graph, x: Var, head_dim: usize, positions: &[usize], base: f64) -> Result<Var> {
    g.rope(x, head_dim, positions, base)
}

/// `cap * tanh(x / cap)`.
pub fn softcap(g: &mut Graph, x: Var, cap: f64) -> Var {
    let s = g.scale(x, 1.0 / cap);
    let t = g.tanh(s);
    g.scale(t, cap)
}

/// Scalar version of [`softcap`].
pub fn softcap_value(x: f64, cap: f64) -> f64 {
    cap * (x / cap).tanh()
}

pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head causal self-attention with rotary embeddings on queries and keys.
pub fn causal_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    num_heads: usize,
    window: AttentionWindow,
    positions: &[usize],
    rope_base: f64,
) -> Result<Var> {
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let width = g.value(q).shape()[1];
    if num_heads == 0 || width % num_heads != 0 {
        return Err(Error::shape(
            "attention",
            format!("width {width} not divisible into {num_heads} heads"),
        ));
    }
    let head_dim = width / num_heads;
    let q = rope(g, q, head_dim, positions, rope_base)?;
    let k = rope(g, k, head_dim, positions, rope_base)?;
    let att = g.causal_attention(q, k, v, num_heads, window.span())?;
    g.matmul(att, w.wo)
}

/// One decoder layer: attention and GeGLU sublayers, each wrapped in a
/// pre-norm and a post-norm before the residual add.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub config: DecoderLayerConfig,
    attn_pre_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    attn_post_norm: ParamId,
    mlp_pre_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
    mlp_post_norm: ParamId,
}

impl DecoderLayer {
    /// Registers the layer's parameters under `prefix`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: DecoderLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embedding_dim;
        let h = config.mlp_hidden;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_h = 1.0 / (h as f64).sqrt();
        let norm = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}.{name}"), Tensor::filled(vec![d], 1.0))
        };
        let attn_pre_norm = norm(store, "attn_pre_norm");
        let attn_post_norm = norm(store, "attn_post_norm");
        let mlp_pre_norm = norm(store, "mlp_pre_norm");
        let mlp_post_norm = norm(store, "mlp_post_norm");
        let mut mat = |store: &mut ParamStore, name: &str, rows, cols, std| {
            store.add(format!("{prefix}.{name}"), normal_matrix(rng, rows, cols, std))
        };
        let wq = mat(store, "wq", d, d, std_d);
        let wk = mat(store, "wk", d, d, std_d);
        let wv = mat(store, "wv", d, d, std_d);
        let wo = mat(store, "wo", d, d, std_d);
        let w_gate = mat(store, "w_gate", d, h, std_d);
        let w_up = mat(store, "w_up", d, h, std_d);
        let w_down = mat(store, "w_down", h, d, std_h);
        Ok(Self {
            config,
            attn_pre_norm,
            wq,
            wk,
            wv,
            wo,
            attn_post_norm,
            mlp_pre_norm,
            w_gate,
            w_up,
            w_down,
            mlp_post_norm,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, positions: &[usize]) -> Result<Var> {
        let c = &self.config;
        let h = rmsnorm(g, x, p[self.attn_pre_norm])?;
        let weights = AttentionWeights {
            wq: p[self.wq],
            wk: p[self.wk],
            wv: p[self.wv],
            wo: p[self.wo],
        };
        let h = causal_attention(g, h, &weights, c.num_heads, c.attention_window, positions, c.rope_base)?;
        let h = rmsnorm(g, h, p[self.attn_post_norm])?;
        let x = g.add(x, h)?;

        let h = rmsnorm(g, x, p[self.mlp_pre_norm])?;
        let h = geglu_mlp(g, h, p[self.w_gate], p[self.w_up], p[self.w_down])?;
        let h = rmsnorm(g, h, p[self.mlp_post_norm])?;
        g.add(x, h)
    }

    /// Matrix parameters of this layer (norm gains excluded).
    pub fn matrix_params(&self) -> [ParamId; 7] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Stack of decoder layers sharing one configuration.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
}

impl DecoderStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        count: usize,
        config: &DecoderLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..count)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.{i}"), config.clone(), rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, mut x: Var, positions: &[usize]) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x, positions)?;
        }
        Ok(x)
    }

    pub fn matrix_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.matrix_params()).collect()
    }
}

use super::kernels::{self, AttnShape};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Gelu,
    Sqrt,
    Rsqrt,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulRowVec { x: Var, v: Var },
    MulColVec { x: Var, v: Var },
    Unary(Var, Unary),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    Pick { src: Var, idx: Vec<usize> },
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SumLast(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    Rope {
        src: Var,
        head_dim: usize,
        positions: Vec<usize>,
        base: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations, in execution order.
///
/// Leaves created with [`Graph::param`] require gradients; every other node
/// requires one iff some input does. [`Graph::backward`] clears intermediate
/// gradients, then walks the record backwards from the loss. Leaf gradients
/// are *not* cleared, so a second `backward` adds to them; call
/// [`Graph::zero_grad`] between passes for a fresh gradient.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => log_sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Rsqrt => 1.0 / x.sqrt(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Gelu => gelu_grad(x),
            Unary::Sqrt => 0.5 / y,
            Unary::Rsqrt => -0.5 * y * y * y,
            Unary::Square => 2.0 * x,
        }
    }
}

/// Adds `src` into the gradient slot of `v`, allocating it on first use.
fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Value-identical copy of `v` that blocks gradient flow back into `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- primitives -------------------------------------------------------

    /// `a @ b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (br, bc) = self.value(b).dims2("matmul")?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    if b_t { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            b_t,
            0.0,
            &mut out,
        );
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.derived(t, &[a, b], Op::MatMul { a, b, b_t }))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(t, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x * c).collect(),
        };
        self.derived(t, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|x| x + c).collect(),
        };
        self.derived(t, &[a], Op::AddScalar(a))
    }

    /// `x[i, j] * v[j]` for `x: [n, d]`, `v: [d]`.
    pub fn mul_row_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("mul_row_vec")?;
        if self.value(v).shape() != [d] {
            return Err(Error::shape(
                "mul_row_vec",
                format!("{:?} * {:?}", self.value(x).shape(), self.value(v).shape()),
            ));
        }
        let (xs, vs) = (self.value(x).data(), self.value(v).data());
        let data = (0..n * d).map(|i| xs[i] * vs[i % d]).collect();
        let t = Tensor::matrix(n, d, data)?;
        Ok(self.derived(t, &[x, v], Op::MulRowVec { x, v }))
    }

    /// `x[i, j] * v[i]` for `x: [n, d]`, `v: [n]`.
    pub fn mul_col_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("mul_col_vec")?;
        if self.value(v).shape() != [n] {
            return Err(Error::shape(
                "mul_col_vec",
                format!("{:?} * {:?}", self.value(x).shape(), self.value(v).shape()),
            ));
        }
        let (xs, vs) = (self.value(x).data(), self.value(v).data());
        let data = (0..n * d).map(|i| xs[i] * vs[i / d]).collect();
        let t = Tensor::matrix(n, d, data)?;
        Ok(self.derived(t, &[x, v], Op::MulColVec { x, v }))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| kind.apply(x)).collect(),
        };
        self.derived(t, &[a], Op::Unary(a, kind))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    /// `ln(sigmoid(x))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Rsqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    fn row_wise(&mut self, a: Var, log: bool) -> Result<Var> {
        let src = self.value(a);
        let d = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            if log {
                let lse = max + total.ln();
                row.iter_mut().for_each(|x| *x -= lse);
            } else {
                row.iter_mut().for_each(|x| *x = (*x - max).exp() / total);
            }
        }
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let op = if log { Op::LogSoftmax(a) } else { Op::Softmax(a) };
        Ok(self.derived(t, &[a], op))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise(a, false)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise(a, true)
    }

    /// Rows `src[idx[0]], src[idx[1]], ...` of a 2-d tensor. Backward
    /// scatter-adds, so repeated indices accumulate.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.value(src).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let s = self.value(src);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(s.row(i));
        }
        let t = Tensor::matrix(idx.len(), d, data)?;
        Ok(self.derived(
            t,
            &[src],
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Embedding lookup: one row of `table` per id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// `out[i] = src[i, idx[i]]` for `src: [n, v]`.
    pub fn pick(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (n, v) = self.value(src).dims2("pick")?;
        if idx.len() != n || idx.iter().any(|&j| j >= v) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into {:?}", idx.len(), self.value(src).shape()),
            ));
        }
        let s = self.value(src).data();
        let data = idx.iter().enumerate().map(|(i, &j)| s[i * v + j]).collect();
        Ok(self.derived(
            Tensor::vector(data),
            &[src],
            Op::Pick {
                src,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of a 2-d tensor.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(src).dims2("slice_cols")?;
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {d}", start + len),
            ));
        }
        let s = self.value(src);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&s.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(n, len, data)?;
        Ok(self.derived(t, &[src], Op::SliceCols { src, start }))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (n, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {n} and {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(n, total, data)?;
        Ok(self.derived(t, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), &[a], Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis of a 2-d tensor: `[n, d] -> [n]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.value(a).dims2("sum_last")?;
        let data = self
            .value(a)
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().sum())
            .collect();
        Ok(self.derived(Tensor::vector(data), &[a], Op::SumLast(a)))
    }

    /// Mean over the last axis of a 2-d tensor: `[n, d] -> [n]`.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.value(a).dims2("mean_last")?;
        let s = self.sum_last(a)?;
        Ok(self.scale(s, 1.0 / d as f64))
    }

    /// Multi-head causal attention over `[n, heads * head_dim]` projections.
    /// Query `i` sees keys `max(0, i - window + 1)..=i`; `None` means all of
    /// `0..=i`. Scores are scaled by `1 / sqrt(head_dim)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: Option<usize>,
    ) -> Result<Var> {
        let (n, w) = self.value(q).dims2("attention")?;
        for other in [k, v] {
            same_shape("attention", self.value(q), self.value(other))?;
        }
        if heads == 0 || w % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {w} not divisible into {heads} heads"),
            ));
        }
        if window == Some(0) {
            return Err(Error::shape("attention", "window must be at least 1"));
        }
        let shape = AttnShape {
            n,
            heads,
            head_dim: w / heads,
            span: window.unwrap_or(n).min(n).max(1),
        };
        let (out, probs) = kernels::attention_forward(
            shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let t = Tensor::matrix(n, w, out)?;
        Ok(self.derived(
            t,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
        ))
    }

    /// Rotary position embedding over `[n, heads * head_dim]`, one position per row.
    pub fn rope(&mut self, src: Var, head_dim: usize, positions: &[usize], base: f64) -> Result<Var> {
        let (n, w) = self.value(src).dims2("rope")?;
        if head_dim == 0 || head_dim % 2 != 0 || w % head_dim != 0 {
            return Err(Error::shape(
                "rope",
                format!("head dim {head_dim} must be even and divide width {w}"),
            ));
        }
        if positions.len() != n {
            return Err(Error::shape(
                "rope",
                format!("{} positions for {n} rows", positions.len()),
            ));
        }
        let data = kernels::rope_rotate(self.value(src).data(), w, head_dim, positions, base, 1.0);
        let t = Tensor::matrix(n, w, data)?;
        Ok(self.derived(
            t,
            &[src],
            Op::Rope {
                src,
                head_dim,
                positions: positions.to_vec(),
                base,
            },
        ))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, loss, 1, |g| g[0] += 1.0);

        let Graph { nodes, grads } = self;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let rg = |v: &Var| nodes[v.0].requires_grad;
            let val = |v: &Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, b_t } => {
                    let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                    let n = node.value.shape()[1];
                    if rg(a) {
                        // dA = dC @ op(B)^T
                        let bd = val(b).data();
                        accumulate(grads, *a, m * k, |g| {
                            kernels::gemm(m, n, k, &up, false, bd, !*b_t, 1.0, g)
                        });
                    }
                    if rg(b) {
                        let ad = val(a).data();
                        if *b_t {
                            // B: [n, k], dB = dC^T @ A
                            accumulate(grads, *b, n * k, |g| {
                                kernels::gemm(n, m, k, &up, true, ad, false, 1.0, g)
                            });
                        } else {
                            // B: [k, n], dB = A^T @ dC
                            accumulate(grads, *b, k * n, |g| {
                                kernels::gemm(k, m, n, ad, true, &up, false, 1.0, g)
                            });
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if rg(v) {
                            accumulate(grads, *v, up.len(), |g| add_into(g, &up));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if rg(a) {
                        accumulate(grads, *a, up.len(), |g| add_into(g, &up));
                    }
                    if rg(b) {
                        accumulate(grads, *b, up.len(), |g| {
                            g.iter_mut().zip(&up).for_each(|(d, u)| *d -= u)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(a, b), (b, a)] {
                        if rg(v) {
                            let o = val(other).data();
                            accumulate(grads, *v, up.len(), |g| {
                                for ((d, u), x) in g.iter_mut().zip(&up).zip(o) {
                                    *d += u * x;
                                }
                            });
                        }
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(grads, *a, up.len(), |g| {
                        g.iter_mut().zip(&up).for_each(|(d, u)| *d += u * c)
                    });
                }
                Op::AddScalar(a) => {
                    accumulate(grads, *a, up.len(), |g| add_into(g, &up));
                }
                Op::MulRowVec { x, v } => {
                    let d = val(v).numel();
                    if rg(x) {
                        let vs = val(v).data();
                        accumulate(grads, *x, up.len(), |g| {
                            for (i, (gd, u)) in g.iter_mut().zip(&up).enumerate() {
                                *gd += u * vs[i % d];
                            }
                        });
                    }
                    if rg(v) {
                        let xs = val(x).data();
                        accumulate(grads, *v, d, |g| {
                            for (i, (u, xv)) in up.iter().zip(xs).enumerate() {
                                g[i % d] += u * xv;
                            }
                        });
                    }
                }
                Op::MulColVec { x, v } => {
                    let n = val(v).numel();
                    let d = up.len() / n.max(1);
                    if rg(x) {
                        let vs = val(v).data();
                        accumulate(grads, *x, up.len(), |g| {
                            for (i, (gd, u)) in g.iter_mut().zip(&up).enumerate() {
                                *gd += u * vs[i / d];
                            }
                        });
                    }
                    if rg(v) {
                        let xs = val(x).data();
                        accumulate(grads, *v, n, |g| {
                            for (i, (u, xv)) in up.iter().zip(xs).enumerate() {
                                g[i / d] += u * xv;
                            }
                        });
                    }
                }
                Op::Unary(a, kind) => {
                    let xs = val(a).data();
                    let ys = node.value.data();
                    accumulate(grads, *a, up.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += up[i] * kind.grad(xs[i], ys[i]);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let ys = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    accumulate(grads, *a, up.len(), |g| {
                        for ((gr, ur), yr) in g.chunks_mut(d).zip(up.chunks(d)).zip(ys.chunks(d)) {
                            let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                            for j in 0..d {
                                gr[j] += yr[j] * (ur[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let ys = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    accumulate(grads, *a, up.len(), |g| {
                        for ((gr, ur), yr) in g.chunks_mut(d).zip(up.chunks(d)).zip(ys.chunks(d)) {
                            let total: f64 = ur.iter().sum();
                            for j in 0..d {
                                gr[j] += ur[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
                Op::GatherRows { src, idx } => {
                    let d = node.value.shape()[1];
                    accumulate(grads, *src, val(src).numel(), |g| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut g[i * d..(i + 1) * d], &up[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::Pick { src, idx } => {
                    let v = val(src).shape()[1];
                    accumulate(grads, *src, val(src).numel(), |g| {
                        for (i, &j) in idx.iter().enumerate() {
                            g[i * v + j] += up[i];
                        }
                    });
                }
                Op::SliceCols { src, start } => {
                    let d = val(src).shape()[1];
                    let len = node.value.shape()[1];
                    accumulate(grads, *src, val(src).numel(), |g| {
                        for (r, ur) in up.chunks(len.max(1)).enumerate() {
                            add_into(&mut g[r * d + start..r * d + start + len], ur);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let width = val(p).shape()[1];
                        if rg(p) {
                            accumulate(grads, *p, val(p).numel(), |g| {
                                for (r, gr) in g.chunks_mut(width.max(1)).enumerate() {
                                    add_into(gr, &up[r * total + offset..r * total + offset + width]);
                                }
                            });
                        }
                        offset += width;
                    }
                }
                Op::SumAll(a) => {
                    let u = up[0];
                    accumulate(grads, *a, val(a).numel(), |g| {
                        g.iter_mut().for_each(|d| *d += u)
                    });
                }
                Op::SumLast(a) => {
                    let d = val(a).shape()[1];
                    accumulate(grads, *a, val(a).numel(), |g| {
                        for (gr, u) in g.chunks_mut(d.max(1)).zip(&up) {
                            gr.iter_mut().for_each(|x| *x += u);
                        }
                    });
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        *shape,
                        val(q).data(),
                        val(k).data(),
                        val(v).data(),
                        probs,
                        &up,
                    );
                    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                        if rg(var) {
                            accumulate(grads, *var, d.len(), |g| add_into(g, &d));
                        }
                    }
                }
                Op::Rope {
                    src,
                    head_dim,
                    positions,
                    base,
                } => {
                    let w = node.value.shape()[1];
                    let back = kernels::rope_rotate(&up, w, *head_dim, positions, *base, -1.0);
                    accumulate(grads, *src, back.len(), |g| add_into(g, &back));
                }
            }
            grads[idx] = Some(up);
        }
        Ok(())
    }
}

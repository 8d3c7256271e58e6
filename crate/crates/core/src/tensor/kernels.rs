//! Inner loops for the primitives that are too expensive to compose from
//! elementwise ops: dense matrix products, masked attention and RoPE.

/// `c = beta * c + op(a) @ op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n buffers
    // whose lengths are asserted, so every access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a multi-head attention call on `[n, heads * head_dim]` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnShape {
    pub n: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of keys visible to each query, counting itself.
    pub span: usize,
}

impl AttnShape {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn first_key(&self, i: usize) -> usize {
        (i + 1).saturating_sub(self.span)
    }

    fn prob_offset(&self, h: usize, i: usize) -> usize {
        (h * self.n + i) * self.span
    }

    pub fn prob_len(&self) -> usize {
        self.heads * self.n * self.span
    }
}

/// Causal attention restricted to the last `span` keys. Returns the output and
/// the attention probabilities, laid out `[head][query][key - first_key]`.
pub(crate) fn attention_forward(
    s: AttnShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let w = s.width();
    let scale = 1.0 / (s.head_dim as f64).sqrt();
    let mut out = vec![0.0; s.n * w];
    let mut probs = vec![0.0; s.prob_len()];
    let mut scores = vec![0.0; s.span];
    for h in 0..s.heads {
        let hc = h * s.head_dim;
        for i in 0..s.n {
            let lo = s.first_key(i);
            let qi = &q[i * w + hc..i * w + hc + s.head_dim];
            let mut max = f64::NEG_INFINITY;
            for (slot, j) in (lo..=i).enumerate() {
                let kj = &k[j * w + hc..j * w + hc + s.head_dim];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores[slot] = dot * scale;
                max = max.max(scores[slot]);
            }
            let count = i + 1 - lo;
            let mut total = 0.0;
            for sc in &mut scores[..count] {
                *sc = (*sc - max).exp();
                total += *sc;
            }
            let p = &mut probs[s.prob_offset(h, i)..s.prob_offset(h, i) + count];
            let oi = &mut out[i * w + hc..i * w + hc + s.head_dim];
            for (slot, j) in (lo..=i).enumerate() {
                let pj = scores[slot] / total;
                p[slot] = pj;
                let vj = &v[j * w + hc..j * w + hc + s.head_dim];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += pj * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k` and `v`.
pub(crate) fn attention_backward(
    s: AttnShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let w = s.width();
    let scale = 1.0 / (s.head_dim as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dp = vec![0.0; s.span];
    for h in 0..s.heads {
        let hc = h * s.head_dim;
        for i in 0..s.n {
            let lo = s.first_key(i);
            let count = i + 1 - lo;
            let p = &probs[s.prob_offset(h, i)..s.prob_offset(h, i) + count];
            let doi = &dout[i * w + hc..i * w + hc + s.head_dim];
            let mut weighted = 0.0;
            for (slot, j) in (lo..=i).enumerate() {
                let vj = &v[j * w + hc..j * w + hc + s.head_dim];
                dp[slot] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += p[slot] * dp[slot];
                let dvj = &mut dv[j * w + hc..j * w + hc + s.head_dim];
                for (d, g) in dvj.iter_mut().zip(doi) {
                    *d += p[slot] * g;
                }
            }
            let qi = &q[i * w + hc..i * w + hc + s.head_dim];
            for (slot, j) in (lo..=i).enumerate() {
                let ds = p[slot] * (dp[slot] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * w + hc..j * w + hc + s.head_dim];
                let dqi = &mut dq[i * w + hc..i * w + hc + s.head_dim];
                for (d, x) in dqi.iter_mut().zip(kj) {
                    *d += ds * x;
                }
                let dkj = &mut dk[j * w + hc..j * w + hc + s.head_dim];
                for (d, x) in dkj.iter_mut().zip(qi) {
                    *d += ds * x;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Rotates interleaved pairs `(2p, 2p + 1)` of every head by
/// `position * base^(-2p / head_dim)`; `sign = -1` applies the inverse rotation.
pub(crate) fn rope_rotate(
    x: &[f64],
    width: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    sign: f64,
) -> Vec<f64> {
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / head_dim as f64))
        .collect();
    let mut out = vec![0.0; x.len()];
    for (i, &pos) in positions.iter().enumerate() {
        let row = &x[i * width..(i + 1) * width];
        let orow = &mut out[i * width..(i + 1) * width];
        for (p, f) in freqs.iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let sin = sign * sin;
            for h in (0..width).step_by(head_dim) {
                let a = row[h + 2 * p];
                let b = row[h + 2 * p + 1];
                orow[h + 2 * p] = a * cos - b * sin;
                orow[h + 2 * p + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

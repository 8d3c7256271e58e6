//! Held-out evaluation, FLOPs accounting and boundary rendering.
//!
//! Content byte `s` of a document sits at input position `s + 1` (after
//! BOS), so "a token starts at byte `s`" is the decision `a_{s+1}` and its
//! probability is `p_{s+1}`.

use rand_chacha::ChaCha8Rng;

use crate::batch::RowPass;
use crate::data::input_row;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::bits_per_byte;
use crate::policy::{BoundarySource, Mode};
use crate::rng::{stream, Purpose};

/// How evaluation picks boundaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalBoundaries {
    /// Sample from the policy with streams derived from this seed.
    Sample(u64),
    /// `a_i = p_i >= t`.
    Threshold(f64),
    /// Evenly spaced at the model's target rate.
    Uniform,
}

/// Agreement of predicted boundaries with generator word starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScores {
    pub precision: f64,
    pub recall: f64,
    /// Matches allowed one byte away.
    pub precision_tol1: f64,
    pub recall_tol1: f64,
    /// Mean boundary probability at true word starts.
    pub mean_p_start: f64,
    /// Mean boundary probability everywhere else.
    pub mean_p_other: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bits_per_byte: f64,
    /// Mean of `M / N` over sequences.
    pub achieved_rate: f64,
    /// Present only when ground truth was supplied.
    pub boundary: Option<BoundaryScores>,
    pub flops_per_sequence: u64,
    pub sequences: usize,
    pub bytes: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "bits_per_byte,achieved_rate,precision,recall,precision_tol1,recall_tol1,mean_p_start,mean_p_other,flops_per_sequence,sequences,bytes";

    /// Boundary fields are left empty when absent.
    pub fn csv_row(&self) -> String {
        let b = self.boundary.map_or_else(
            || ",,,,,".to_string(),
            |b| {
                format!(
                    "{},{},{},{},{},{}",
                    b.precision, b.recall, b.precision_tol1, b.recall_tol1, b.mean_p_start, b.mean_p_other
                )
            },
        );
        format!(
            "{},{},{},{},{},{}",
            self.bits_per_byte, self.achieved_rate, b, self.flops_per_sequence, self.sequences, self.bytes
        )
    }
}

#[derive(Default)]
struct Counts {
    tp: usize,
    predicted: usize,
    tp_tol: usize,
    truth: usize,
    recalled: usize,
    recalled_tol: usize,
    p_start: f64,
    n_start: usize,
    p_other: f64,
    n_other: usize,
}

/// Per-byte language-model loss and boundary statistics over `docs`. Each
/// document is one sequence: BOS and all but its last byte as input, every
/// byte as a target. `labels[d][s]` marks word starts of document `d`.
pub fn evaluate(
    model: &Model,
    docs: &[Vec<u8>],
    labels: Option<&[Vec<bool>]>,
    mode: Mode,
    boundaries: EvalBoundaries,
) -> Result<EvalReport> {
    let docs: Vec<(usize, &Vec<u8>)> = docs.iter().enumerate().filter(|(_, d)| !d.is_empty()).collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let census = ParamCensus::of(model);
    let mut nats = 0.0;
    let mut bytes = 0;
    let mut rate = 0.0;
    let mut tokens = 0;
    let mut positions = 0;
    let mut counts = Counts::default();
    for &(d, doc) in &docs {
        let row = input_row(doc);
        let ids = &row[..doc.len()];
        let targets = &row[1..];
        let mut rng = stream(sample_seed(boundaries), Purpose::Eval, d as u64, 0);
        let uniform;
        let source = match boundaries {
            EvalBoundaries::Sample(_) => BoundarySource::Sample(&mut rng),
            EvalBoundaries::Threshold(t) => BoundarySource::<ChaCha8Rng>::Threshold(t),
            EvalBoundaries::Uniform => {
                uniform = crate::policy::uniform_baseline_mask(ids.len(), model.config().target_rate);
                BoundarySource::Fixed(&uniform)
            }
        };
        let pass = RowPass::run(model, ids, targets, source, mode, false)?;
        nats -= pass.values(pass.lm_logprobs).iter().sum::<f64>();
        bytes += targets.len();
        let mask = &pass.trace.boundary.mask;
        let m = mask.iter().filter(|&&a| a).count();
        rate += m as f64 / mask.len() as f64;
        tokens += m;
        positions += mask.len();
        if let Some(labels) = labels {
            let truth = labels
                .get(d)
                .filter(|l| l.len() == doc.len())
                .ok_or_else(|| Error::Corpus(format!("labels of document {d} do not match its length")))?;
            score(&mut counts, &mask[1..], &pass.values(pass.trace.boundary.probs)[1..], &truth[..mask.len() - 1]);
        }
    }
    let n = docs.len();
    let mean_n = positions as f64 / n as f64;
    let mean_m = tokens as f64 / n as f64;
    let boundary = labels.map(|_| {
        let c = &counts;
        BoundaryScores {
            precision: ratio(c.tp, c.predicted),
            recall: ratio(c.recalled, c.truth),
            precision_tol1: ratio(c.tp_tol, c.predicted),
            recall_tol1: ratio(c.recalled_tol, c.truth),
            mean_p_start: c.p_start / c.n_start.max(1) as f64,
            mean_p_other: c.p_other / c.n_other.max(1) as f64,
        }
    });
    Ok(EvalReport {
        bits_per_byte: bits_per_byte(nats, bytes),
        achieved_rate: rate / n as f64,
        boundary,
        flops_per_sequence: census.flops_per_sequence(mean_n.round() as u64, mean_m.round() as u64),
        sequences: n,
        bytes,
    })
}

fn sample_seed(b: EvalBoundaries) -> u64 {
    match b {
        EvalBoundaries::Sample(seed) => seed,
        _ => 0,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `pred`, `probs` and `truth` are aligned on content bytes.
fn score(c: &mut Counts, pred: &[bool], probs: &[f64], truth: &[bool]) {
    let near = |v: &[bool], s: usize| (s.saturating_sub(1)..=(s + 1).min(v.len() - 1)).any(|k| v[k]);
    for s in 0..truth.len() {
        if pred[s] {
            c.predicted += 1;
            c.tp += truth[s] as usize;
            c.tp_tol += near(truth, s) as usize;
        }
        if truth[s] {
            c.truth += 1;
            c.recalled += pred[s] as usize;
            c.recalled_tol += near(pred, s) as usize;
            c.p_start += probs[s];
            c.n_start += 1;
        } else {
            c.p_other += probs[s];
            c.n_other += 1;
        }
    }
}

/// Boundary probability of every byte of `doc` (length `doc.len()`).
pub fn boundary_probabilities(model: &Model, doc: &[u8], mode: Mode, boundaries: EvalBoundaries) -> Result<Vec<f64>> {
    let ids = input_row(doc);
    let mut g = crate::tensor::Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let x = model.encode(&mut g, &p, &ids)?;
    let mut rng = stream(sample_seed(boundaries), Purpose::Eval, 0, 0);
    let uniform;
    let source = match boundaries {
        EvalBoundaries::Sample(_) => BoundarySource::Sample(&mut rng),
        EvalBoundaries::Threshold(t) => BoundarySource::Threshold(t),
        EvalBoundaries::Uniform => {
            uniform = crate::policy::uniform_baseline_mask(ids.len(), model.config().target_rate);
            BoundarySource::Fixed(&uniform)
        }
    };
    let trace = model.boundaries(&mut g, &p, x, source, mode)?;
    Ok(g.value(trace.probs).data()[1..].to_vec())
}

/// Matrix parameters applied once per byte and once per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub byte: u64,
    pub token: u64,
}

impl ParamCensus {
    pub fn of(model: &Model) -> Self {
        let count = |ids: Vec<crate::params::ParamId>| ids.iter().map(|&id| model.params().get(id).numel() as u64).sum();
        Self {
            byte: count(model.byte_matrix_params()),
            token: count(model.token_matrix_params()),
        }
    }

    pub fn of_config(config: &ModelConfig) -> Result<Self> {
        Ok(Self::of(&Model::new(config.clone(), 0)?))
    }

    /// `6 (P_byte N + P_token M)`.
    pub fn flops_per_sequence(&self, n: u64, m: u64) -> u64 {
        6 * (self.byte * n + self.token * m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderFormat {
    Ansi,
    Html,
}

/// Colors every character from blue (`p = 0`) to red (`p = 1`). A multi-byte
/// character takes the probability of its last byte. Input that is not valid
/// UTF-8 is rendered byte by byte, non-printable bytes as `\xNN`.
pub fn render_boundaries(text: &[u8], probs: &[f64], format: RenderFormat) -> Result<String> {
    if text.len() != probs.len() {
        return Err(Error::shape(
            "render_boundaries",
            format!("{} bytes, {} probabilities", text.len(), probs.len()),
        ));
    }
    let mut pieces: Vec<(String, f64)> = Vec::new();
    match std::str::from_utf8(text) {
        Ok(s) => {
            for (i, ch) in s.char_indices() {
                pieces.push((ch.to_string(), probs[i + ch.len_utf8() - 1]));
            }
        }
        Err(_) => {
            for (&b, &p) in text.iter().zip(probs) {
                let s = if b.is_ascii_graphic() || b == b' ' || b == b'\n' {
                    (b as char).to_string()
                } else {
                    format!("\\x{b:02x}")
                };
                pieces.push((s, p));
            }
        }
    }
    let mut out = String::new();
    if format == RenderFormat::Html {
        out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"></head><body><pre style=\"font-family:monospace\">");
    }
    for (s, p) in pieces {
        let p = p.clamp(0.0, 1.0);
        let r = (255.0 * p).round() as u8;
        let b = (255.0 * (1.0 - p)).round() as u8;
        match format {
            RenderFormat::Ansi => out.push_str(&format!("\x1b[38;2;{r};0;{b}m{s}\x1b[0m")),
            RenderFormat::Html => out.push_str(&format!("<span style=\"color:rgb({r},0,{b})\">{}</span>", html_escape(&s))),
        }
    }
    if format == RenderFormat::Html {
        out.push_str("</pre></body></html>\n");
    }
    Ok(out)
}

fn html_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

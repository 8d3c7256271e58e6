//! Synthetic corpus of Zipf-distributed words with known word starts.

use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separator {
    None,
    #[default]
    Space,
}

/// Generator settings. Words are drawn with probability proportional to
/// `rank^-zipf_exponent`, rank 1 being the first lexicon entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Explicit lexicon; when empty, `lexicon_size` words are generated.
    pub lexicon: Vec<String>,
    pub lexicon_size: usize,
    pub separator: Separator,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub n_docs: usize,
    /// Extra documents written to a separate held-out file.
    pub heldout_docs: usize,
    pub doc_len: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            lexicon: Vec::new(),
            lexicon_size: 512,
            separator: Separator::Space,
            zipf_exponent: 1.2,
            seed: 0,
            n_docs: 1000,
            heldout_docs: 64,
            doc_len: 256,
        }
    }
}

impl SyntheticSpec {
    /// The lexicon in rank order.
    pub fn words(&self) -> Result<Vec<Vec<u8>>> {
        let words: Vec<Vec<u8>> = if self.lexicon.is_empty() {
            zipf_lexicon(self.lexicon_size, self.seed)
        } else {
            self.lexicon.iter().map(|w| w.as_bytes().to_vec()).collect()
        };
        if words.is_empty() || words.iter().any(Vec::is_empty) {
            return Err(Error::Config("lexicon must hold non-empty words".into()));
        }
        Ok(words)
    }
}

/// `size` distinct lowercase words; rank `r` (1-based) has length
/// `min(12, 2 + floor(0.8 log2 r))`, so frequent words are short. At the
/// default exponent 1.2 and 512 words the expected word length is about 4
/// bytes, one word start every ~5 bytes with separators.
pub fn zipf_lexicon(size: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = stream(seed, Purpose::Synthetic, 1 << 39, 0);
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::with_capacity(size);
    for rank in 1..=size {
        let len = (2 + (0.8 * (rank as f64).log2()).floor() as usize).min(12);
        loop {
            let w: Vec<u8> = (0..len).map(|_| b'a' + rng.gen_range(0..26u8)).collect();
            if seen.insert(w.clone()) {
                words.push(w);
                break;
            }
        }
    }
    words
}

/// Documents plus the offset of every word start in each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub docs: Vec<Vec<u8>>,
    pub starts: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    /// Per-byte labels: `true` where a word starts.
    pub fn labels(&self, doc: usize) -> Vec<bool> {
        let mut l = vec![false; self.docs[doc].len()];
        for &s in &self.starts[doc] {
            l[s] = true;
        }
        l
    }

    /// Documents `range` as a corpus of their own.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SyntheticCorpus {
        SyntheticCorpus {
            docs: self.docs[range.clone()].to_vec(),
            starts: self.starts[range].to_vec(),
        }
    }

    /// One line per document, comma-separated offsets.
    pub fn boundaries_text(&self) -> String {
        let mut out = String::new();
        for s in &self.starts {
            let line: Vec<String> = s.iter().map(usize::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// `n_docs` documents of exactly `doc_len` bytes, the last word cut where
/// the document ends.
pub fn gen_synthetic(spec: &SyntheticSpec, n_docs: usize, doc_len: usize) -> Result<SyntheticCorpus> {
    let words = spec.words()?;
    let zipf = Zipf::new(words.len() as u64, spec.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf exponent: {e}")))?;
    let mut docs = Vec::with_capacity(n_docs);
    let mut starts = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut rng = stream(spec.seed, Purpose::Synthetic, d as u64, 0);
        let mut doc = Vec::with_capacity(doc_len + 13);
        let mut s = Vec::new();
        while doc.len() < doc_len {
            let rank = zipf.sample(&mut rng) as usize;
            s.push(doc.len());
            doc.extend_from_slice(&words[rank - 1]);
            if spec.separator == Separator::Space {
                doc.push(b' ');
            }
        }
        doc.truncate(doc_len);
        docs.push(doc);
        starts.push(s);
    }
    Ok(SyntheticCorpus { docs, starts })
}

/// Parses a boundaries file (one line of comma-separated offsets per
/// document) into per-byte labels for documents of the given lengths.
pub fn parse_boundaries(text: &str, doc_lens: &[usize]) -> Result<Vec<Vec<bool>>> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != doc_lens.len() {
        return Err(Error::Corpus(format!(
            "{} boundary lines for {} documents",
            lines.len(),
            doc_lens.len()
        )));
    }
    lines
        .iter()
        .zip(doc_lens)
        .map(|(line, &len)| {
            let mut labels = vec![false; len];
            for field in line.split(',').filter(|f| !f.trim().is_empty()) {
                let s: usize = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Corpus(format!("bad boundary offset {field:?}")))?;
                *labels
                    .get_mut(s)
                    .ok_or_else(|| Error::Corpus(format!("offset {s} beyond document of {len} bytes")))? = true;
            }
            Ok(labels)
        })
        .collect()
}

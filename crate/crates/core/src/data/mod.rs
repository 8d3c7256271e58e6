//! Byte corpora, batching and the synthetic segmented-language generator.
//!
//! Ids `0..=255` are raw bytes, [`BOS`] opens every row and [`PAD`] is
//! reserved (rows are fixed length, so it is never emitted).

mod corpus;
mod synth;

pub use corpus::{ingest, ingest_corpus, read_corpus, write_binary_corpus, write_text_corpus, BINARY_MAGIC};
pub use synth::{gen_synthetic, parse_boundaries, zipf_lexicon, Separator, SyntheticCorpus, SyntheticSpec};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

/// Model input `BOS x_0 .. x_{L-1}` for one content sequence of length `L`.
/// Its last byte is only ever a target.
pub fn input_row(content: &[u8]) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(content.iter().map(|&b| b as u32))
        .collect()
}

/// `B` rows of `BOS + L` ids and the `L` next-byte targets of each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteBatch {
    pub ids: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl ByteBatch {
    pub fn from_sequences<S: AsRef<[u8]>>(seqs: &[S]) -> Result<Self> {
        let len = seqs.first().map(|s| s.as_ref().len()).unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.as_ref().len() != len) {
            return Err(Error::Corpus("batch rows must share a positive length".into()));
        }
        let ids: Vec<Vec<u32>> = seqs.iter().map(|s| input_row(s.as_ref())).collect();
        let targets = ids.iter().map(|row| row[1..].to_vec()).collect();
        Ok(Self { ids, targets })
    }

    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Model input of row `b`: `ids[b][..L]`.
    pub fn input(&self, b: usize) -> &[u32] {
        &self.ids[b][..self.seq_len()]
    }
}

/// Single pass over sequences of exactly `seq_len` bytes in a seeded order,
/// `batch_size` at a time. Shorter sequences are skipped and a trailing
/// partial batch is dropped.
#[derive(Clone, Debug)]
pub struct Batcher {
    seqs: Vec<Vec<u8>>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Batcher {
    pub fn new(seqs: Vec<Vec<u8>>, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let seqs: Vec<Vec<u8>> = seqs
            .into_iter()
            .filter(|s| s.len() >= seq_len)
            .map(|mut s| {
                s.truncate(seq_len);
                s
            })
            .collect();
        if seqs.len() < batch_size {
            return Err(Error::EmptyCorpus);
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut stream(seed, Purpose::Shuffle, 1, 0));
        Ok(Self {
            seqs,
            order,
            batch_size,
            next: 0,
        })
    }

    /// Number of full batches in one pass.
    pub fn len(&self) -> usize {
        self.order.len() / self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the next batch to be produced.
    pub fn position(&self) -> usize {
        self.next
    }

    /// Continue from batch `index`, as after `index` calls to `next`.
    pub fn seek(&mut self, index: usize) {
        self.next = index;
    }
}

impl Iterator for Batcher {
    type Item = ByteBatch;

    fn next(&mut self) -> Option<ByteBatch> {
        if self.next >= self.len() {
            return None;
        }
        let start = self.next * self.batch_size;
        let rows: Vec<&[u8]> = self.order[start..start + self.batch_size]
            .iter()
            .map(|&i| self.seqs[i].as_slice())
            .collect();
        self.next += 1;
        Some(ByteBatch::from_sequences(&rows).expect("rows share seq_len"))
    }
}

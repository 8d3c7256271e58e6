//! Corpus files and ingestion.
//!
//! Two formats are read:
//!
//! * text: one document per line (`\n` separated, a trailing newline is
//!   ignored);
//! * binary: the 8 bytes `BINARY_MAGIC`, a `u64` document count, then each
//!   document as a `u64` length followed by its bytes (all little-endian).
//!   Documents may contain any byte value including newlines.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const BINARY_MAGIC: &[u8; 8] = b"SCTKDOC1";

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(BINARY_MAGIC) {
        return parse_binary(&raw[BINARY_MAGIC.len()..]);
    }
    let mut docs: Vec<Vec<u8>> = raw.split(|&b| b == b'\n').map(<[u8]>::to_vec).collect();
    if raw.ends_with(b"\n") {
        docs.pop();
    }
    Ok(docs)
}

fn take_u64(rest: &mut &[u8]) -> Result<u64> {
    if rest.len() < 8 {
        return Err(Error::Corpus("truncated binary corpus".into()));
    }
    let (head, tail) = rest.split_at(8);
    *rest = tail;
    Ok(u64::from_le_bytes(head.try_into().expect("8 bytes")))
}

fn parse_binary(mut rest: &[u8]) -> Result<Vec<Vec<u8>>> {
    let count = take_u64(&mut rest)?;
    let mut docs = Vec::new();
    for _ in 0..count {
        let len = take_u64(&mut rest)? as usize;
        if rest.len() < len {
            return Err(Error::Corpus("truncated binary corpus".into()));
        }
        let (doc, tail) = rest.split_at(len);
        docs.push(doc.to_vec());
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(Error::Corpus(format!("{} trailing bytes after last document", rest.len())));
    }
    Ok(docs)
}

pub fn write_binary_corpus<S: AsRef<[u8]>>(path: &Path, docs: &[S]) -> Result<()> {
    let mut out = BINARY_MAGIC.to_vec();
    out.extend((docs.len() as u64).to_le_bytes());
    for d in docs {
        let d = d.as_ref();
        out.extend((d.len() as u64).to_le_bytes());
        out.extend_from_slice(d);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Newline-delimited documents; fails if any document contains a newline.
pub fn write_text_corpus<S: AsRef<[u8]>>(path: &Path, docs: &[S]) -> Result<()> {
    let mut out = Vec::new();
    for d in docs {
        let d = d.as_ref();
        if d.contains(&b'\n') {
            return Err(Error::Corpus("document contains a newline; use the binary format".into()));
        }
        out.extend_from_slice(d);
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Drops documents shorter than `min_len`, truncates the rest to at most
/// `target_len` bytes and shuffles them with `seed`.
pub fn ingest(docs: Vec<Vec<u8>>, min_len: usize, target_len: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    let mut kept: Vec<Vec<u8>> = docs
        .into_iter()
        .filter(|d| d.len() >= min_len && !d.is_empty())
        .map(|mut d| {
            d.truncate(target_len);
            d
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    kept.shuffle(&mut stream(seed, Purpose::Shuffle, 0, 0));
    Ok(kept)
}

pub fn ingest_corpus(path: &Path, min_len: usize, target_len: usize, seed: u64) -> Result<Vec<Vec<u8>>> {
    ingest(read_corpus(path)?, min_len, target_len, seed)
}

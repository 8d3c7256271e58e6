//! Learned tokenization for byte-level language models.
//!
//! An autoregressive U-net encodes bytes, samples token boundaries from a
//! small stochastic policy, runs a token-level backbone over the selected
//! positions and decodes back to next-byte predictions. The boundary policy is
//! trained with a score-function estimator whose variance is reduced with
//! early-exit relative rewards, time discounting and batch-centered advantages.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Graph, Tensor, Var};

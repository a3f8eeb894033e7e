//! Concept-aligned report generation on a synthetic radiology corpus.
//!
//! The pipeline: synthetic corpus and exact parser, concept banks, a
//! patch-embedding vision encoder, concept-query alignment decoders,
//! contrastive and matching feature enhancement, attention-entropy gating,
//! and a prefix-conditioned causal language model with beam search.

pub mod alignment;
pub mod analysis;
pub mod autograd;
pub mod bank;
pub mod corpus;
pub mod enhancement;
pub mod error;
pub mod gating;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod train;
pub mod vision;

pub use error::{Error, Result};

//! Two-stage text augmentation for few-shot text classification.
//!
//! The generation stage produces new examples per class with two
//! complementary processes: semantic enrichment ([`seg`]), which conditions
//! on per-seed "spark thoughts", and contrastive enrichment ([`ceg`]), which
//! conditions on discriminative texts against the most similar classes. The
//! alignment stage ([`adapt`]) verifies every generated example with a
//! retrieval-shot LLM classifier and rewrites the misaligned ones instead of
//! dropping them.
//!
//! LLM and embedding access go through pluggable backends ([`llm`],
//! [`embedding`]) so the whole pipeline runs hermetically against a
//! scripted mock and a local hashing embedder.

pub mod adapt;
pub mod ceg;
pub mod context;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod hashing;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod seg;

pub use error::{Error, Result};

/// Reserved label for predictions that match no dataset class.
pub const OOD_LABEL: &str = "__ood__";

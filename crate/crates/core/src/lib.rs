//! Joint multi-sentence inference: corpus ingestion, a word-level
//! tokenizer, multi-sentence positive/negative sampling, packed inputs, a
//! small transformer encoder with four candidate-scoring heads, training
//! loops, and ranking/verification evaluation.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod packing;
pub mod sampler;
pub mod tokenizer;
pub mod training;

pub use error::{Error, ErrorClass, Result};

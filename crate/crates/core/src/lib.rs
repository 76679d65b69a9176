//! DMoE pipeline: synthetic multilingual corpora, a small decoder-only
//! transformer with extensible mixture-of-experts layers, parameter-deviation
//! language fingerprinting, balanced language clustering, two-stage MoE
//! training, expert-copy language adaptation, and perplexity evaluation.

pub mod adapt;
pub mod artifact;
pub mod checkpoint;
pub mod cluster;
pub mod corpus;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod train;

pub use error::{DmoeError, Result};

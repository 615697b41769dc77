//! Few-shot label-sequence search.
//!
//! Given K labeled examples per class and a mask-bearing template, the
//! pipeline generates per-class label-sequence candidates by aggregated beam
//! search, re-ranks them contrastively, enumerates the best label mappings and
//! picks a winner by fine-tuning on each and validating on the dev split.

pub mod beamsearch;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod finetune_rerank;
pub mod lm;
pub mod metrics;
pub mod persist;
pub mod pipeline;
pub mod remote;
pub mod rerank;
pub mod scoring;
pub mod synthetic;
pub mod templating;

pub use error::{Error, ErrorKind, Result};
pub use exec::Exec;

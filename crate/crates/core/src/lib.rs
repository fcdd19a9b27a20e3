//! Layer-equivalence diagnostics for decoder-only transformers.
//!
//! The crate measures how much a model's next-token distribution moves when
//! layer weights are replaced, interchanged, deleted, averaged or shared, and
//! turns those measurements into layer-pruning decisions that are evaluated
//! under pinned perplexity contracts.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod fixtures;
pub mod golden;
pub mod jacobian;
pub mod metrics;
pub mod model;
pub mod report;
pub mod selectors;
pub mod tensor;

pub use error::{Error, Result};

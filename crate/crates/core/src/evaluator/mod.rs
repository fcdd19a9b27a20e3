//! Perplexity under pinned evaluation contracts, plus the statistics used to
//! report it.

mod contract;
mod ppl;
mod stability;
pub mod stats;

pub use contract::{EvalContract, BUILTIN_CONTRACTS};
pub use ppl::{evaluate_intervention, sliding_window_ppl, window_schedule, PplReport, WindowSpan};
pub use stability::{prompt_stability, stability_from_matrix, StabilityRow, StabilityTable};
pub use stats::{bootstrap_ci, rank_correlation, sign_test, ConfidenceInterval, RankKind, SignTest};

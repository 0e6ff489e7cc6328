//! Two-stage learning-to-rank extraction of query-relevant meeting utterances.
//!
//! Stage 1 ranks contiguous windows ("samples") of a transcript with a model
//! trained on a pairwise margin loss. The top members of every window are
//! pooled and re-ranked globally by a second model trained on a top-k
//! listwise KL objective. The best utterances under a token budget become the
//! input text for a downstream abstractive generator.
//!
//! Binary-cross-entropy ("locator") and MSE ("simulator") objectives are
//! available as baselines, together with ROUGE and rank-correlation metrics
//! for comparing extractors.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod order;
pub mod par;
pub mod pipeline;
pub mod ranklosses;
pub mod rouge;
pub mod scorer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

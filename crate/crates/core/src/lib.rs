//! Time-series forecasting by semantic-anchor prefix prompting over a frozen
//! miniature transformer.
//!
//! The pipeline: per-channel windows are instance-normalised, split into
//! trend / seasonal / residual components, patched, and projected into a
//! token sequence. Learned anchors derived from a word-embedding matrix are
//! scored against each window by cosine similarity; the top-K are prepended
//! as a prefix before a causal transformer whose attention and feed-forward
//! weights stay frozen. A linear head maps the patch positions back to three
//! component forecasts that are summed and de-normalised.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod prompt;
pub mod series;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

//! Supervision allocation for packed causal language-model training.
//!
//! Each supervised token in a packed sequence has an effective left context:
//! how many earlier tokens of its own document segment it can see. This crate
//! packs tokenized corpora while tracking that quantity, buckets it on a
//! log-2 scale, derives inverse-frequency tail weights (plus the ablation
//! schedules), evaluates the weighted objective and writes the binary files a
//! trainer consumes. A small hand-differentiated language model and a probe
//! analyzer exercise the mechanism end to end.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod exposure;
pub mod objective;
pub mod packer;
pub mod probe;
pub mod toylm;
pub mod util;
pub mod weights;

pub use error::{Error, Result};

//! Sublayer-granularity pruning for decoder-only transformers.
//!
//! Every attention and FFN sublayer is an independent pruning candidate. The
//! greedy search in [`search`] repeatedly drops the sublayer whose removal
//! moves the model's output logits the least, measured by one of the
//! distances in [`metrics`] on a calibration set. [`analysis`] accounts for
//! parameters, MACs and perplexity of the pruned model and classifies which
//! sublayers were removed.
//!
//! Flat sublayer indices are 0-based: `2l` is the attention sublayer of
//! block `l` and `2l + 1` its FFN.

pub mod analysis;
pub mod calib;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod search;
pub mod tensor;
pub mod toy;

pub use calib::CalibrationSet;
pub use error::{CheckpointError, Error, Result};
pub use metrics::MetricKind;
pub use model::{LayerMask, Logits, Model, ModelConfig};
pub use search::{greedy_prune, PruneConfig, PruneTrace};

//! Metadata-conditioned MOS prediction and listening-test evaluation tooling.
//!
//! * [`data`]: ratings CSV loading, utterance MOS and split statistics
//! * [`features`]: metadata vocabularies, one-hot encoding, unknown-class dropout
//! * [`model`] and [`checkpoint`]: the trainable predictor and its file format
//! * [`metrics`]: utterance- and system-level SRCC / MSE
//! * [`analysis`]: per-system diagnostics, split divergence, SVG figures
//! * [`simulator`]: synthetic listening tests with known ground truth
//! * [`cli`]: the `mosbench` command-line surface

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod emb;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod simulator;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

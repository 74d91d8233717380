//! Cross-domain training for small-sample single-trial ERP classification.
//!
//! The crate combines three training-time mechanisms on a compact
//! convolution–attention classifier:
//!
//! * a target-weighted cross-entropy whose weight warms up towards
//!   `clip(sqrt(N_S / N_T), 1, 6)` ([`schedule`]),
//! * batch normalization with shared affine parameters and separate running
//!   statistics per domain ([`splitbn`]),
//! * an unbiased RBF-kernel MMD penalty between source and target logits with
//!   a median-heuristic bandwidth ([`mmd`]).
//!
//! Everything is differentiated by the small reverse-mode engine in
//! [`autodiff`]. [`data`] holds the epoch file format, a synthetic two-domain
//! generator and the cross-validation protocol; [`trainer`] runs the training
//! loops and [`stats`] the evaluation statistics.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod mmd;
pub mod schedule;
pub mod splitbn;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};

/// Which domain's normalization statistics a forward pass reads and updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

//! Student-teacher feature pyramid matching for unsupervised anomaly
//! detection: a student network learns to reproduce a frozen teacher's
//! multi-level features on normal images, and at test time the per-pixel
//! feature discrepancy is the anomaly score.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod archive;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scorer;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, ErrorClass, Result};

//! Unified logical and structural anomaly detection.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod distance;
pub mod error;
pub mod export;
pub mod features;
pub mod global;
pub mod inference;
pub mod local;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod resize;
pub mod trainer;

pub use error::{Error, Result};

//! Certified-radius-aware adversarial attacks on randomized smoothing and
//! interval-bound-propagation certifiers.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod ibp;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod smoothing;

pub use error::{Error, Result};

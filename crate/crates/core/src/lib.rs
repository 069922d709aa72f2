//! Geometric probes over serialized language-model activations.
//!
//! Order probes recover list orderings from hidden states through a learned
//! projection and anchor. Preference probes and their baselines predict which
//! of two items is preferred, and can be transferred frozen to other tasks to
//! measure implicit associations as win rates with exact binomial intervals.

// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod order;
pub mod preference;
pub mod probe;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};

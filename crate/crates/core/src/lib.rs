//! Dual-branch student training for partially relevant video retrieval.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Row segments are passed as `&[Range]`, often with a single block.
#![allow(clippy::single_range_in_vec_init)]

pub mod compute;
pub mod csvfmt;
pub mod data;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod schedule;
pub mod similarity;
pub mod supervision;
pub mod training;

pub use error::{Error, Result};

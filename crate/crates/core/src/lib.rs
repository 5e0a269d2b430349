//! Dense retrieval with hard negatives drawn from an asynchronously refreshed
//! nearest-neighbor index, alongside the sparse and in-batch baselines it is
//! compared against.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod corpus;
pub mod dense_index;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod negatives;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};

// NaN-rejecting range checks are written as negated comparisons on purpose,
// and the kernels index several parallel buffers with one loop counter.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod loss;
pub mod model;
pub mod par;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

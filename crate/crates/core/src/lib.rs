// Negated float comparisons are used on purpose so NaN fails validation, and the
// numeric kernels index several arrays in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{PitError, Result};
pub use tensor::Tensor2;

// `!(x >= 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod linalg;
pub mod panel;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};
pub mod simplex;
pub mod trop;
pub mod baselines;
pub mod theory;
pub mod simlab;
pub mod inference;
pub mod diagnostics;

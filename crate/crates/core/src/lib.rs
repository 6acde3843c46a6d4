// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod consistency;
pub mod error;
pub mod fisher;
pub mod geometry;
pub mod harness;
pub mod lvmodel;
pub mod matrix;
pub mod solver;

pub use error::{Error, Result};
pub use matrix::{EigenDecomposition, SymMatrix};

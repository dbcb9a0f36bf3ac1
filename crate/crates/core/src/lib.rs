//! Variational data assimilation for viscous Burgers-type equations on `[0, 1]`.

// `!(x > 0.0)` is used on purpose to reject NaN alongside the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod assimilation;
pub mod bayes;
pub mod certificates;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod model;
pub mod optimize;
pub mod pde;
pub mod verify;

pub use error::{Error, Result};
pub use grid::GridFn;

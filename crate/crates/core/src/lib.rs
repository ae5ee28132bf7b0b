//! Multi-task regression with a shared latent manifold and learned
//! source-to-target transfer ratios.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bilevel;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod runstore;

pub use error::{GateError, Result};

//! Contraction-constrained neural emulation of the Newton solver inside
//! trapezoidal implicit Runge-Kutta integration.

// `!(v > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod integrator;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod projection;
pub mod runtime;
pub mod systems;

pub use error::{Error, Result};

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Simulation and gradient-based design of broadband diffractive optical networks.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod fields;
pub mod io;
pub mod materials;
pub mod network;
pub mod propagation;
pub mod stl;
pub mod training;

pub use error::{Error, Result};

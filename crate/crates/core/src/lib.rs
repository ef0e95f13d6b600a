//! Self-training on black-box pseudo labels with three interacting memories.
//!
//! A small classifier adapts to an unlabeled target domain using only the
//! predictions of a source model it cannot inspect. Memories built from the
//! momentum model's features recalibrate those predictions on the fly (see
//! [`memory`]), and the calibrated distributions denoise each training label
//! (see [`adapt`]).

pub mod adapt;
pub mod blackbox;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod memory;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};

//! Selective state space vision backbones with token labeling.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod checks;
pub mod config;
mod error;
pub mod fmt;
pub mod model;
pub mod module;
pub mod numerics;
pub mod ssm;
pub mod token_labeling;
pub mod training;

pub use error::{Error, Result};
pub use module::Module;

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod implicit;
pub mod models;
pub mod nn;
pub mod solver;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

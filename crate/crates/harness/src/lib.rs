//! Desk-scale training, evaluation, ablation and analysis harness for the
//! messenger-token window transformer.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod idx;
pub mod optim;
pub mod train;

pub use error::{HarnessError, Result};
pub mod ablate;
pub mod checks;
pub mod cli;
pub mod comm;

//! Local-window vision transformer with per-window messenger tokens.
//!
//! Patch tokens attend only inside non-overlapping `w×w` windows. Each window
//! carries one extra messenger token that takes part in the window's
//! attention. Between attention rounds the messenger tokens of an `R×R` region
//! exchange channel groups, which is the only path for information to move
//! between windows inside a stage.
//!
//! Modules, bottom up:
//! - [`tensor`]: dense tensors, tape-based reverse-mode autodiff, gradient checking.
//! - [`window`]: window partitioning, padding, shuffle regions, token merging.
//! - [`block`]: messenger attachment, local attention with relative position bias,
//!   messenger manipulation and the full block.
//! - [`arch`]: architecture presets, parameter construction and the forward pass.
//! - [`complexity`]: closed-form FLOPs, parameter and receptive-field accounting.

pub mod arch;
pub mod block;
pub mod complexity;
pub mod error;
pub mod init;
pub mod tensor;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};

//! Quantization-aware training with importance-based structured weight
//! freezing.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`kernels`], [`ops`], [`tape`]: dense arithmetic and
//!   reverse-mode differentiation with row-selective weight gradients.
//! - [`quant`]: range observation, integer fake quantization with
//!   straight-through gradients, and learnable quantization parameters.
//! - [`freeze`]: channel and layer importance and the three freezing planners.
//! - [`cost`]: closed-form backward MAC counts and reconciliation against the
//!   live counters.
//! - [`net`], [`optim`], [`data`], [`trainer`]: models, optimizers, datasets
//!   and the training loop.

pub mod cost;
pub mod data;
pub mod error;
pub mod freeze;
pub mod kernels;
pub mod net;
pub mod ops;
pub mod optim;
pub mod quant;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ops::{MacCounter, RowMask};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

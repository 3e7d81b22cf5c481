//! Multi-exit transformer encoders: training regimes with self-distillation
//! and gradient regularization, plus entropy-based early exit.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradreg;
pub mod inference;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Minimal deterministic `f64` tensor library with reverse-mode autodiff.
//!
//! Shapes never broadcast except for trailing-axis bias addition; any other
//! mismatch is an error. Every forward op checks its output for NaN/Inf.

mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_multi, grad_check_params, Coverage, ParamCheck};
pub use params::{Adam, AdamConfig, Graph, Param, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Mode, Tape, Var};
pub use tensor::Tensor;

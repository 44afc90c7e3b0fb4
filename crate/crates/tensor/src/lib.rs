//! Minimal dense-tensor kernel with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Operations record themselves on a [`Tape`]
//! as they execute; [`Tape::backward`] replays the record in reverse and
//! yields gradients for every recorded value and every [`Parameter`] read
//! through [`Tape::param`].

mod error;
pub mod nn;
mod param;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Minimal dense tensor library with a dynamic reverse-mode tape.
//!
//! The op set is deliberately small: exactly what a channel-attention image
//! restoration network and its losses need. Everything runs on the CPU and is
//! deterministic for a fixed build.

mod element;
mod error;
pub mod gradcheck;
mod ops;
mod param;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use ops::shape::PadMode;
pub use param::{Module, Parameter};
pub use tensor::{is_grad_enabled, no_grad, BackwardArgs, BackwardFn, Tensor};

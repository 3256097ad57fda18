//! Dense tensors and a reverse-mode tape.
//!
//! Everything the attention model needs lives here: a row-major [`Tensor`],
//! named trainable parameters in a [`ParamStore`], a [`Graph`] that records
//! every primitive applied during a forward pass and replays it backwards, an
//! [`Adam`] optimizer and a central-difference [`grad_check`].
//!
//! The scalar type is chosen once per build through [`Real`]; it is `f64`
//! unless the `f32` feature is enabled.

mod adam;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_floor, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Global scalar type.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Global scalar type.
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of the compiled precision, echoed into checkpoints and configs.
pub const PRECISION: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

/// Epsilon added to the variance inside [`Graph::instance_norm`].
pub const NORM_EPS: Real = 1e-5;

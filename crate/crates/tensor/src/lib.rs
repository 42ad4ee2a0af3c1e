//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! Every op appends a node holding its value and whatever the backward rule
//! needs. [`Tape::backward`] walks the tape once in reverse. Broadcasting is
//! limited to row-wise bias/scale helpers; everything else requires exact
//! shapes.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod linalg;
mod nn;
mod scalar;
mod shape;
mod tape;

pub use array::Tensor;
pub use error::{Result, TensorError};
pub use scalar::Scalar;
pub use tape::{ConvGeom, OpKind, Tape, Var};

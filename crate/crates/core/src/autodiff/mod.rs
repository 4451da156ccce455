//! Complex-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; a single
//! reverse sweep from a real scalar then yields `dL/dRe(z) + i dL/dIm(z)` for
//! every learnable leaf. Real-valued quantities ride in complex storage with
//! zero imaginary part.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::CTensor;

/// Negative slope used by every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

//! Dense arrays with reverse-mode gradients for the handful of operations the
//! projector pipeline uses.
//!
//! Every forward operation exists twice: as a pure function over
//! [`DenseArray`] (used at inference time) and as a [`Tape`] method that
//! records enough state to run the backward pass. Both paths share the same
//! kernels, so they agree bit for bit.
//!
//! Values are generic over [`Scalar`]. Training runs in `f32`; gradient checks
//! run the identical code in `f64` so that finite differences are not
//! dominated by rounding noise.

pub(crate) mod array;
pub(crate) mod batchnorm;
mod gradcheck;
mod tape;

pub use array::{l2_normalize, matmul, relu, softmax, transpose, DenseArray};
pub use batchnorm::{batch_norm, BatchNormState, NormMode, BN_EPSILON, BN_MOMENTUM};
pub use gradcheck::{grad_check, relative_error, GRAD_CHECK_FLOOR};
pub use tape::{ColumnStats, Tape, Var};

use std::fmt::Debug;

/// Floating point element type of a [`DenseArray`].
pub trait Scalar: num_traits::Float + Debug + Default + Send + Sync + 'static {
    fn cast(x: f64) -> Self;
    fn widen(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

//! Dense 2-D array numerics with a reverse-mode tape.
//!
//! Everything the losses need is expressed as [`Graph`] operations over
//! row-major [`Array`]s. Values are generic over [`Scalar`] so the same code
//! runs at 64-bit for gradient verification and at 32-bit for training.

mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod optim;
mod params;
mod rng;

pub use array::Array;
pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use kernels::gemm;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use rng::{mix_stream, RngStream};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Floating point element type of arrays and graphs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short name used in diagnostics ("f32" / "f64").
    const NAME: &'static str;

    /// `c <- alpha * a @ b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of the
    /// given extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Smallest row norm accepted by L2 normalization.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("row {row} has norm {norm:e}, below the normalization floor")]
    DegenerateNorm { row: usize, norm: f64 },
    #[error("loss must be a 1x1 array, got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("function evaluation produced a non-finite value")]
    NonFiniteEvaluation,
    #[error("gradient for parameter {param} is not finite")]
    NonFiniteGradient { param: String },
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("array data length {len} does not match shape {shape:?}")]
    BadData { len: usize, shape: [usize; 2] },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

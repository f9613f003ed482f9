//! Dense matrices and a small reverse-mode differentiation engine.
//!
//! The engine records every operation on a [`Graph`] in execution order, so
//! the node list is already a topological order; [`Graph::backward`] walks it
//! once in reverse. Values are checked for NaN/Inf after every operation.
//!
//! All computation is generic over [`Real`] so the same code runs at 32-bit
//! precision for training and at 64-bit precision for gradient checks.

pub mod gradcheck;
mod graph;
mod matrix;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use graph::{Graph, NodeId, Segment};
pub use matrix::{dot, Matrix};

/// Floating point scalar usable by the engine (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Converts an `f64` constant into this precision.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: dimension mismatch between {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix {rows}x{cols} needs {} values, got {len}", rows * cols)]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: zero-norm vector")]
    Degenerate { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    Index {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("backward needs a 1x1 root, got {}x{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
}

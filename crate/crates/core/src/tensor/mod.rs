//! Dense `f64` tensors and a tape-based reverse-mode autodiff.
//!
//! A [`Tensor`] is a plain row-major array. Computation that needs gradients
//! runs on a [`Tape`]: leaves are registered with [`Tape::leaf`], every
//! operation on a [`Var`] appends a node with its local backward rule, and
//! [`Var::backward`] sweeps the tape in reverse from a scalar.
//!
//! Broadcasting follows trailing-dimension rules only (a dimension matches
//! if equal or if either side is 1); anything else is reshaped explicitly.

mod array;
mod conv;
pub mod gradcheck;
mod ops;
mod tape;

use thiserror::Error;

pub use array::Tensor;
pub(crate) use array::resolve_axis;
pub use conv::{conv_output_size, Conv2dGeometry};
pub(crate) use ops::gemm;
pub use ops::{BinaryOp, ReduceOp, UnaryOp};
pub use tape::{BackwardFn, Tape, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: isize,
        shape: Vec<usize>,
    },
    #[error("permute: {axes:?} is not a permutation of the axes of {shape:?}")]
    InvalidPermutation { axes: Vec<usize>, shape: Vec<usize> },
    #[error("{op}: range {start}..{} exceeds extent {extent}", start + len)]
    OutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("conv2d: kernel {kernel:?} larger than input {input:?} padded by {padding}")]
    KernelTooLarge {
        input: Vec<usize>,
        kernel: Vec<usize>,
        padding: usize,
    },
    #[error("{len} values do not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

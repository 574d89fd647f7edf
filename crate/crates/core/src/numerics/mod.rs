//! Dense arrays, a reverse-mode autodiff tape, named parameter stores and
//! finite-difference gradient checking.

mod array;
mod gradcheck;
mod graph;
mod params;
mod real;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{Graph, Var};
#[allow(unused_imports)]
pub(crate) use graph::sigmoid;
pub use params::ParamStore;
pub use real::Real;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0} needs at least one operand")]
    Empty(&'static str),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

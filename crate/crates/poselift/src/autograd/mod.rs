//! Minimal reverse-mode automatic differentiation over dense `f64`
//! arrays, plus the Adam optimizer.
//!
//! A [`Graph`] is a tape of [`Var`] nodes built by forward operations;
//! [`Graph::backward`] populates gradients for every node reachable from
//! a scalar root. Gradients accumulate across backward calls until
//! [`Graph::zero_grads`] is called. A graph is confined to one worker at
//! a time; distinct graphs may run concurrently.
//!
//! Trainable parameters live in a [`ParamSet`] (named arrays with a
//! deterministic iteration order) and are bound into a graph as leaves
//! per forward pass.

mod adam;
mod graph;
pub mod gradcheck;
mod param;

pub use adam::{clip_grad_norm, AdamHyperparams, AdamState};
pub use graph::{Graph, Var};
pub use param::{format_f64, parse_param_header_and_rows, write_arrays, BoundParams, ParamSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be a 1x1 scalar, got {shape:?}")]
    NonScalarRoot { shape: (usize, usize) },
    #[error("{op}: input outside the operation's domain")]
    Domain { op: &'static str },
    #[error("missing gradient for parameter '{name}'")]
    MissingGradient { name: String },
    #[error("duplicate parameter name '{name}'")]
    DuplicateParam { name: String },
    #[error("unknown parameter '{name}'")]
    UnknownParam { name: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Ops append nodes and return
//! [`Var`] handles; [`Tape::backward`] walks the record in reverse and yields
//! [`Gradients`] for every node that reaches the root.
//!
//! ```
//! use umanet::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.0));
//! let y = tape.sigmoid(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(tape.value(y).item(), 0.5);
//! assert_eq!(grads.get(x).unwrap()[0], 0.25);
//! ```

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, Tensor};

pub(crate) use tape::sigmoid;

/// Guard applied to probabilities before `log` and to loss denominators.
pub const EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward needs a single-element root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}

#[cfg(test)]
mod tests;

//! Minimal reverse-mode automatic differentiation over dense float tensors.
//!
//! Values live on a [`Tape`]; every primitive on a [`Var`] records enough
//! state to push gradients back to its inputs. The primitive set is the one a
//! small convolutional encoder/decoder and sample-based transport losses need:
//! broadcasting arithmetic, activations, reductions, matrix products,
//! 2-D (transposed) convolution, pooling, normalization and sorting.
//!
//! ```
//! use tensorcore::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod float;
mod gradcheck;
pub mod io;
pub mod nn;
mod ops;
pub mod optim;
mod tape;
mod tensor;

pub use float::{gemm, DType, Float};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use ops::conv::{conv2d_output_extent, conv_transpose2d_output_extent};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use nn::{Bound, NormKind, ParamId, ParamSet};
pub use optim::Adam;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        TensorError::Shape { op, detail }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Contract { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

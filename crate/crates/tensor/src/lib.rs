//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every primitive that touches a tensor requiring gradients records a node.
//! Node ids are handed out in creation order, so sorting the nodes reachable
//! from a loss by id yields the recording order of the [`Tape`]; `backward`
//! walks that order in reverse.
//!
//! ```
//! use sparsepo_tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
//! ```

mod error;
mod gemm;
mod gradcheck;
mod ops;
mod suite;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradient, GradCheckFailure, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use suite::primitive_gradient_suite;
pub use tape::{Tape, TapeEntry};
pub use tensor::{is_grad_enabled, no_grad, Tensor};

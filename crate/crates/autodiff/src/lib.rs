//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Gradients are built from the same recorded operations as the forward
//! pass, so with `create_graph` they can be differentiated again. That is
//! what makes an exact gradient through an inner gradient step possible.
//!
//! ```
//! use omla_autodiff::{backward, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::scalar(2.0));
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = backward(&y, &[&x], true).unwrap().remove(0);
//! let d2y = backward(&dy, &[&x], false).unwrap().remove(0);
//! assert_eq!(dy.item().unwrap(), 12.0);
//! assert_eq!(d2y.item().unwrap(), 12.0);
//! ```

mod error;
mod grad;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use grad::{backward, grad};
pub use tape::{NodeRef, Tape};
pub use tensor::Tensor;

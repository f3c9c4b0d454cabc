//! Tape-based reverse-mode automatic differentiation for small dense
//! networks.
//!
//! A [`Tape`] records one forward pass. Parameters live in a
//! [`ParameterSet`] that the tape borrows, so recording a pass never copies
//! weights. After the pass, [`Tape::backward`] walks the tape in reverse and
//! returns per-parameter [`Gradients`], which feed [`ParameterSet::adam_step`].
//!
//! ```
//! use h2o2_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(&tape, x).item(), Some(6.0));
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use nn::{Activation, Linear, Mlp, OutputInit};
pub use params::{AdamConfig, Gradients, ParamId, ParameterSet};
pub use tape::{grad, Tape, TapeGradients, Var};
pub use tensor::Tensor;

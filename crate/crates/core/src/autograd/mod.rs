//! Reverse-mode automatic differentiation over a recorded tape, plus the
//! layer operations the network needs.
//!
//! Every operation is a method on [`Tape`]: it computes its output eagerly,
//! records a backward rule, and returns a [`Var`] handle. [`Tape::backward`]
//! walks the records in reverse and returns [`Gradients`] for every value
//! that requires them.

mod conv;
mod norm;
mod ops;
mod pool;
mod tape;

pub use conv::{conv2d, conv2d_with, conv_out_extent, Conv2dParams, ConvAlgo};
pub use norm::{BatchStats, NormMode};
pub use ops::linear;
pub use pool::pooled_shape;
pub use tape::{Backward, Gradients, Tape, Var};

//! Omni-scale network engine for person re-identification.
//!
//! The crate contains a small tensor engine with reverse-mode
//! differentiation ([`autograd`]), the network builder ([`arch`]), static
//! cost analysis and gradient checking ([`analysis`]), data loading and
//! augmentation ([`data`]), training and retrieval evaluation ([`train`],
//! [`eval`]), and introspection tools ([`introspect`]). The `osnet` binary
//! wires them together.

pub mod analysis;
pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod introspect;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

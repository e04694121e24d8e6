//! Deterministic spiking neural network training with reversible blocks.
//!
//! The crate is organized bottom-up: [`tensor`] kernels, the [`memtrack`]
//! ledger, [`neurons`], composite [`layers`], the reversible engine
//! [`reveng`], network builders in [`models`] and the [`train`] loop.

pub mod error;
pub mod exec;
pub mod layers;
pub mod memtrack;
pub mod models;
pub mod neurons;
pub mod reveng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::{ExecCtx, Fault};
pub use reveng::Engine;
pub use tensor::{Precision, Tensor};

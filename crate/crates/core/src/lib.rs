//! Prompt-guided single-object tracking on a small vision transformer.
//!
//! The crate carries its own reverse-mode autodiff ([`graph`]) so every
//! operator, including deformable convolution and the Laplacian pyramid,
//! can be gradient-checked in double precision.

pub mod bbox;
pub mod data;
pub mod dpblock;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompters;
pub mod rng;
pub mod tensor;
pub mod tracker;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{Real, Tensor};

//! Multi-scale localized cross-attention fusion of paired RGB and infrared
//! token grids, with the degradation protocol, a desk-scale training and
//! evaluation harness, and FLOP / parameter accounting.

pub mod degrade;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod imageio;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Param, Parameterized, Tensor};

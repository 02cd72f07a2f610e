//! Engine for reconstructing hyperspectral cubes from RGB images.
//!
//! The crate is organized bottom-up: a reverse-mode autodiff tensor core,
//! the three spectral modeling blocks (grouped spectral-wise attention,
//! neighboring-spectra memory, patch-attention fusion), the full network,
//! losses and metrics, cube/SRF file handling with a synthetic data
//! generator, and a deterministic Adam training loop with checkpointing.

pub mod dataio;
pub mod error;
pub mod exec;
pub mod grscm;
pub mod nescm;
pub mod network;
pub mod objectives;
pub mod paf;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor};

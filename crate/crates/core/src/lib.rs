//! Diffusion-driven two-stage refinement of 3D box proposals.
//!
//! Proposals act as the reference frame for a conditional diffusion process
//! over normalized box residuals. A small attention network reads RoI
//! features of the proposal and of a noisy hypothesis box and predicts the
//! clean residual; inference runs DDIM steps with proposal renewal.

pub mod boxes;
pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};

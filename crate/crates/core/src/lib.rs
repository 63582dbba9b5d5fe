//! One-step generator distillation and reward alignment on toy diffusion
//! models, with closed-form oracles for the gradient identities involved.

pub mod align;
pub mod diffusion;
pub mod error;
pub mod generator;
pub mod nn;
pub mod rewards;
pub mod verify;

pub use error::{Error, Result};

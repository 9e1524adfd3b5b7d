//! Dual-modality (RGB-X) object detection with diffusion-based box
//! refinement, at desk scale.
//!
//! The crate provides:
//! - modality codecs (polarimetric, depth, infrared) producing 3-channel
//!   inputs for the auxiliary branch ([`polar`]),
//! - CBAM-style attention and the dynamic channel-reduction fusion block
//!   ([`attention`]),
//! - dynamic multi-level RoI aggregation ([`dmlab`]),
//! - the forward box-corruption process and DDIM-style refinement loop
//!   ([`diffusion`]),
//! - the full training loss with attention regularizers ([`losses`]),
//! - seeded RGB corruption generators for robustness studies ([`corruption`]),
//! - and a trainable end-to-end detector with synthetic data generation,
//!   COCO-style evaluation, and checkpointing ([`detector`]).

pub mod error;
pub mod nn;
pub mod scalar;
pub mod viridis;

pub mod attention;
pub mod corruption;
pub mod diffusion;
pub mod dmlab;
pub mod losses;
pub mod polar;
pub mod detector;

pub use error::{Error, Result};
pub use scalar::Scalar;

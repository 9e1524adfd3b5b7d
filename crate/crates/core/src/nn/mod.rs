//! Minimal neural-network toolkit: flat parameter store, layers with
//! explicit forward/backward passes, AdamW, and finite-difference checking.
//!
//! Everything is generic over [`crate::scalar::Scalar`]; training runs in
//! `f32`, gradient verification in `f64`.

pub mod adamw;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod params;

pub use adamw::{AdamW, AdamWConfig};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{GroupNorm, LayerNorm};
pub use params::{GradStore, Init, ParamId, ParamStore};

//! Trimap-free human matting at desk scale.
//!
//! A single RGB image goes in, an alpha matte comes out. The network is
//! split into a low-resolution semantic branch, a foreground-probability-map
//! module that fuses the encoder scales into a per-pixel foreground
//! probability, a high-resolution detail branch guided by that map, and a
//! fusion branch that merges semantics and details into the final matte.
//!
//! Everything runs on a small CPU tensor type with tape-based reverse-mode
//! differentiation, so the whole stack is trainable and verifiable against
//! finite differences without any external ML runtime.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};

//! Spiking split-computing toolkit.
//!
//! Forward dynamics for leaky integrate-and-fire networks with
//! threshold-dependent batch normalization, declarative spiking ResNet50 /
//! MobileNetV1 specifications, the encoder/decoder bottleneck placed at a
//! split point, energy estimation from synaptic-operation counts, and the
//! split-point planner.
//!
//! Tensors are laid out `(T, B, C, H, W)` row-major throughout.

pub mod arch;
pub mod bottleneck;
pub mod energy;
mod error;
pub mod layers;
pub mod network;
pub mod planner;
mod real;
pub mod spike;
pub mod tables;
mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{FeatureShape, Shape5, Tensor};

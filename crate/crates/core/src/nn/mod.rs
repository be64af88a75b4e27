//! Minimal CPU neural-network substrate with hand-written backpropagation.

pub mod layers;
pub mod network;
pub mod optim;
pub mod pointwise;
pub mod real;
pub mod seg3d;
pub mod unet;

pub use layers::Dims;
pub use network::Network;
pub use optim::{Adam, AdamConfig, Ema};
pub use pointwise::{PointwiseConfig, PointwiseNet};
pub use real::Real;
pub use seg3d::{Seg3d, Seg3dConfig};
pub use unet::{auto_levels, UNet, UNetConfig};

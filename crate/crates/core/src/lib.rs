//! Paired 3-D mask and image volume synthesis.
//!
//! Stage one generates multi-label mask volumes slice-block by slice-block
//! with a multi-condition diffusion model ([`mcdpm`], [`sampler`]). Stage two
//! renders an image volume from the mask with a sequential slice generator
//! ([`imagegen`]) and polishes it with three per-view semantic diffusion
//! models ([`refiner`]). [`phantom`] supplies procedurally generated training
//! pairs and [`eval`] scores the results.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod export;
pub mod imagegen;
pub mod io;
pub mod mcdpm;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod refiner;
pub mod rng;
pub mod sampler;
pub mod volume;

pub use error::{Error, Result};

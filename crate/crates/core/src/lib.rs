//! Vector-quantized discrete diffusion on small latent grids.
//!
//! This crate holds the numerical core and is `no_std` (it needs `alloc`):
//!
//! * [`schedule`]: the cosine keep-probability schedule.
//! * [`diffusion`]: uniform-mixing categorical diffusion, closed-form
//!   marginals and posteriors, and the variational bound.
//! * [`codebook`]: nearest-neighbour quantization, the three-term VQ loss and
//!   the straight-through gradient.
//! * [`refit`]: codebook re-building (uniform feature sampling, AFK-MC²
//!   seeding, Lloyd's k-means).
//! * [`autoencoder`]: a patch-linear encoder/decoder pair for toy images.
//! * [`denoiser`]: the reference ẑ₀ predictor, Adam, importance-sampled
//!   timesteps and an exact enumeration oracle.
//! * [`sampler`]: ancestral sampling and mask-constrained inpainting.
//! * [`eval`]: bits-per-position bounds, usage and total-variation metrics.
//!
//! File formats, checkpoints and the command-line driver live in the `vqdd`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autoencoder;
pub mod codebook;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod eval;
pub mod grid;
pub(crate) mod math;
pub mod refit;
pub mod sampler;
pub mod schedule;
pub mod toy;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, GridDistribution, LatentGrid, ProbGrid};
pub use schedule::Schedule;

//! Files, checkpoints and the command-line driver around [`vqdd_core`].
//!
//! * [`checkpoint`]: single-file checkpoints with a CRC-checked section table.
//! * [`dataset`]: binary and CSV datasets of toy images or latent grids.
//! * [`mask`], [`sidecar`]: inpainting masks and generating-distribution files.
//! * [`config`]: config files, run hashes and the metrics CSV.
//! * [`cli`]: the `vqdd` subcommands.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod mask;
pub mod sidecar;

pub use checkpoint::Checkpoint;
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use vqdd_core;

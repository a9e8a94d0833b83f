//! The ẑ₀ predictor and everything needed to train it.

mod adam;
mod model;
mod oracle;
mod timestep;
mod train;

pub use adam::{adam_step, AdamOutcome, AdamState};
pub use model::{DenoiserConfig, DenoiserModel, Gradients, ParamLayout};
pub use oracle::{oracle_denoiser, OracleDenoiser};
pub use timestep::TimestepSampler;
pub use train::{train_denoiser, TrainConfig, TrainRecord};

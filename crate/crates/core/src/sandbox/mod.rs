//! A small latent video diffusion pipeline to host the conditioning mechanisms.

pub mod dataset;
pub mod denoiser;
pub mod metrics;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use dataset::{DatasetConfig, MovingSquares};
pub use denoiser::{AttentionLayout, Denoiser, DenoiserSpec, DenoiserWeights};
pub use metrics::region_color_score;
pub use sampler::{generate, sample_baseline, Generation, SamplerConfig};
pub use schedule::NoiseSchedule;
pub use train::{train_toy, TrainConfig, TrainReport};

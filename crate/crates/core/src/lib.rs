//! Temporal in-context fine-tuning for conditional sequence diffusion.
//!
//! Condition frames, buffer frames and target frames are concatenated along
//! time and denoised by a single sequence model with per-frame noise levels.
//! The crate provides the noise schedule, the layouts and level vectors, a
//! small hand-differentiated temporal transformer, masked-loss training,
//! active-set sampling with its baselines, and synthetic tasks with ground
//! truth for evaluation.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod export;
pub mod frame;
pub mod layout;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use frame::{Frame, LatentSequence};

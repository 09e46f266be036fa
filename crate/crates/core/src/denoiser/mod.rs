//! The trainable noise predictor.
//!
//! Each frame becomes one token: a linear projection of the frame, plus an
//! embedding of that frame's own noise level, plus a learned position
//! embedding. A label token is prepended and every token attends to every
//! other (no causal mask), so each predicted noise frame depends on the whole
//! sequence. Gradients are derived by hand in `model.rs`.

mod kernels;
mod model;
mod params;

pub use model::ForwardCache;
pub use params::{count_params, DenoiserConfig, DenoiserParams, Gradients, TensorInfo};

use crate::error::{invalid, Result};
use crate::frame::LatentSequence;
use crate::layout::NoiseLevelVector;

/// The conditioning label standing in for a text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelCondition(pub u32);

impl LabelCondition {
    pub fn check(self, n_labels: usize) -> Result<()> {
        if (self.0 as usize) < n_labels {
            Ok(())
        } else {
            Err(invalid!("label {} outside table of {n_labels}", self.0))
        }
    }
}

/// Anything that predicts per-frame noise for a sequence at per-frame levels.
pub trait Denoiser {
    fn predict(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
    ) -> Result<LatentSequence>;
}

impl Denoiser for DenoiserParams {
    fn predict(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
    ) -> Result<LatentSequence> {
        self.forward(seq, levels, label)
    }
}

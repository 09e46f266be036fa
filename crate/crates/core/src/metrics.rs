//! Evaluation metrics against analytic ground truth.

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::frame::LatentSequence;

/// Mean over frames of the squared L2 frame error.
pub fn condition_fidelity(generated: &LatentSequence, ground_truth: &LatentSequence) -> Result<f64> {
    if generated.len() != ground_truth.len() {
        return Err(shape_err!(
            "{} generated frames vs {} ground-truth frames",
            generated.len(),
            ground_truth.len()
        ));
    }
    if generated.is_empty() {
        return Err(shape_err!("cannot score an empty sequence"));
    }
    let mut total = 0.0;
    for (g, t) in generated.frames().iter().zip(ground_truth.frames()) {
        total += g.squared_distance(t)?;
    }
    Ok(total / generated.len() as f64)
}

/// Mean L2 distance between adjacent frames; 0 for fewer than two frames.
pub fn smoothness(seq: &LatentSequence) -> f64 {
    if seq.len() < 2 {
        return 0.0;
    }
    let total: f64 = seq
        .frames()
        .windows(2)
        .map(|w| w[0].squared_distance(&w[1]).map(f64::sqrt).unwrap_or(f64::NAN))
        .sum();
    total / (seq.len() - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub index: usize,
    /// Mean squared error per pixel over the target frames.
    pub target_mse: f64,
    /// Mean per-frame squared L2 error over the target frames.
    pub condition_fidelity: f64,
    pub smoothness: f64,
}

impl SampleMetrics {
    pub fn compute(index: usize, generated: &LatentSequence, ground_truth: &LatentSequence) -> Result<Self> {
        let fid = condition_fidelity(generated, ground_truth)?;
        let dim = ground_truth.dim().unwrap_or(1) as f64;
        Ok(Self {
            index,
            target_mse: fid / dim,
            condition_fidelity: fid,
            smoothness: smoothness(generated),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub count: usize,
    pub target_mse: MeanStd,
    pub condition_fidelity: MeanStd,
    pub smoothness: MeanStd,
}

impl EvalReport {
    pub fn new(samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid!("evaluation report needs at least one sample"));
        }
        if samples.iter().any(|s| !(s.target_mse.is_finite() && s.smoothness.is_finite())) {
            return Err(crate::Error::Numeric("non-finite metric in evaluation".into()));
        }
        let col = |f: fn(&SampleMetrics) -> f64| MeanStd::of(&samples.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            count: samples.len(),
            target_mse: col(|s| s.target_mse),
            condition_fidelity: col(|s| s.condition_fidelity),
            smoothness: col(|s| s.smoothness),
            samples,
        })
    }

    /// Scores generated target sequences against ground truth.
    pub fn score(generated: &[LatentSequence], ground_truth: &[LatentSequence]) -> Result<Self> {
        if generated.len() != ground_truth.len() {
            return Err(shape_err!(
                "{} generated samples vs {} ground-truth samples",
                generated.len(),
                ground_truth.len()
            ));
        }
        let samples = generated
            .iter()
            .zip(ground_truth)
            .enumerate()
            .map(|(i, (g, t))| SampleMetrics::compute(i, g, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    /// `index,target_mse,condition_fidelity,smoothness` per sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,target_mse,condition_fidelity,smoothness\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.index, s.target_mse, s.condition_fidelity, s.smoothness
            ));
        }
        out
    }
}

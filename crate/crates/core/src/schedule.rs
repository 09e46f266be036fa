//! Variance-preserving noise schedules and the forward process
//! `z_t = alpha_t * z_0 + sigma_t * eps`.

use crate::error::{invalid, shape_err, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::LinearBeta => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::LinearBeta),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

/// Beta endpoints of the linear ramp at `T = 1000`; other horizons rescale
/// them by `1000 / T` so the terminal signal level stays comparable.
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;
const REFERENCE_STEPS: f64 = 1000.0;
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// `(alpha_t, sigma_t)` tables over `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    kind: ScheduleKind,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(invalid!("schedule needs T >= 2, got {steps}"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::LinearBeta => {
                let scale = REFERENCE_STEPS / steps as f64;
                let (lo, hi) = (BETA_START * scale, BETA_END * scale);
                (0..steps)
                    .map(|i| {
                        let frac = i as f64 / (steps - 1) as f64;
                        (lo + (hi - lo) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0f64);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            steps,
            kind,
            alpha,
            sigma,
        })
    }

    /// The horizon `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(invalid!("timestep {t} outside 0..={}", self.steps))
        } else {
            Ok(())
        }
    }
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind)
}

/// `alpha_t * z0 + sigma_t * eps`, elementwise.
pub fn forward_diffuse(z0: &Frame, t: usize, eps: &Frame, sched: &NoiseSchedule) -> Result<Frame> {
    if z0.len() != eps.len() {
        return Err(shape_err!(
            "signal has dimension {} but noise has {}",
            z0.len(),
            eps.len()
        ));
    }
    sched.check_t(t)?;
    Ok(diffuse_with(z0, eps, sched.alpha(t), sched.sigma(t)))
}

pub(crate) fn diffuse_with(z0: &Frame, eps: &Frame, alpha: f64, sigma: f64) -> Frame {
    Frame::new(
        z0.as_slice()
            .iter()
            .zip(eps.as_slice())
            .map(|(x, e)| alpha * x + sigma * e)
            .collect(),
    )
}

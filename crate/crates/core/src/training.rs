//! Masked-loss fine-tuning and homogeneous-noise pretraining.
//!
//! Fine-tuning builds each input the same way inference does: clean
//! condition frames, buffer frames noised to `min(level_b, t)`, targets at
//! `t`. Only generated target frames enter the loss; the model's output on
//! condition, buffer and query frames receives exactly zero gradient.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ScheduleDescriptor};
use crate::denoiser::{DenoiserConfig, DenoiserParams, LabelCondition};
use crate::error::{invalid, shape_err, Error, Result};
use crate::frame::{Frame, LatentSequence};
use crate::layout::{
    buffer_content, check_context, noise_level_vector, BufferLevels, LayoutSpec, NoiseLevelVector,
};
use crate::optim::OptimizerState;
use crate::rng::Rng;
use crate::schedule::{diffuse_with, NoiseSchedule};

/// One condition/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// Clean context. The first `L` frames are the condition; any further
    /// frames are buffer source frames or query frames.
    pub condition: LatentSequence,
    /// The `K` ground-truth target frames (query slots included).
    pub target: LatentSequence,
    pub label: LabelCondition,
}

/// A clip for homogeneous-noise pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainClip {
    pub frames: LatentSequence,
    pub label: LabelCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Keep buffers at their initial level regardless of `t` (ablation).
    pub fixed_buffer_levels: bool,
    /// Cosine learning-rate decay to zero over this many steps; 0 keeps the
    /// rate constant.
    pub decay_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 2,
            grad_clip: 0.0,
            fixed_buffer_levels: false,
            decay_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid!("Adam betas must lie in [0, 1)"));
        }
        if self.grad_clip < 0.0 {
            return Err(invalid!("grad_clip must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate applied at optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        let p = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    fn optimizer(&self, params: &DenoiserParams) -> OptimizerState {
        OptimizerState::adam(params, self.lr, self.beta1, self.beta2, self.adam_eps)
    }
}

/// A fully built model input with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInput {
    pub seq: LatentSequence,
    /// Noise used per frame; zero for clean frames.
    pub eps: LatentSequence,
    pub levels: NoiseLevelVector,
    pub label: LabelCondition,
    /// Frames whose prediction error is penalized.
    pub loss_positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_time: f64,
}

/// Mean squared L2 error over `positions`.
pub fn loss_over(eps_true: &LatentSequence, eps_pred: &LatentSequence, positions: &[usize]) -> Result<f64> {
    if eps_true.len() != eps_pred.len() {
        return Err(shape_err!(
            "{} true noise frames vs {} predicted",
            eps_true.len(),
            eps_pred.len()
        ));
    }
    if positions.is_empty() {
        return Err(invalid!("loss over an empty frame set"));
    }
    let mut total = 0.0;
    for &i in positions {
        total += eps_true[i].squared_distance(&eps_pred[i])?;
    }
    Ok(total / positions.len() as f64)
}

/// d(loss_over)/d(eps_pred), zero outside `positions`.
pub fn loss_over_grad(
    eps_true: &LatentSequence,
    eps_pred: &LatentSequence,
    positions: &[usize],
) -> Result<LatentSequence> {
    let dim = eps_pred.dim().ok_or_else(|| shape_err!("empty prediction"))?;
    let mut grad = LatentSequence::zeros(eps_pred.len(), dim);
    let scale = 2.0 / positions.len() as f64;
    for &i in positions {
        let g = grad[i].as_mut_slice();
        for ((gv, p), t) in g.iter_mut().zip(eps_pred[i].as_slice()).zip(eps_true[i].as_slice()) {
            *gv = scale * (p - t);
        }
    }
    Ok(grad)
}

/// Mean over generated target frames of the squared L2 noise error.
pub fn masked_loss(eps_true: &LatentSequence, eps_pred: &LatentSequence, spec: &LayoutSpec) -> Result<f64> {
    check_total(eps_true, spec)?;
    check_total(eps_pred, spec)?;
    loss_over(eps_true, eps_pred, &spec.generated_positions())
}

pub fn masked_loss_grad(
    eps_true: &LatentSequence,
    eps_pred: &LatentSequence,
    spec: &LayoutSpec,
) -> Result<LatentSequence> {
    check_total(eps_true, spec)?;
    check_total(eps_pred, spec)?;
    loss_over_grad(eps_true, eps_pred, &spec.generated_positions())
}

fn check_total(seq: &LatentSequence, spec: &LayoutSpec) -> Result<()> {
    if seq.len() != spec.total() {
        return Err(shape_err!(
            "sequence of {} frames for a layout of {}",
            seq.len(),
            spec.total()
        ));
    }
    Ok(())
}

/// Builds the noised input at global step `t` with buffers at
/// `min(level_b, t)`.
pub fn build_train_input(
    sample: &TrainSample,
    spec: &LayoutSpec,
    levels: &BufferLevels,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TrainInput> {
    build_train_input_with(sample, spec, levels, t, sched, rng, false)
}

/// As [`build_train_input`]; `fixed_buffers` keeps every buffer frame at its
/// initial level instead of following `t` down.
pub fn build_train_input_with(
    sample: &TrainSample,
    spec: &LayoutSpec,
    levels: &BufferLevels,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    fixed_buffers: bool,
) -> Result<TrainInput> {
    if t == 0 || t > sched.steps() {
        return Err(invalid!("training timestep {t} outside 1..={}", sched.steps()));
    }
    check_context(&sample.condition, spec)?;
    if sample.target.len() != spec.target {
        return Err(shape_err!(
            "sample has {} target frames, layout needs {}",
            sample.target.len(),
            spec.target
        ));
    }
    let dim = sample.condition.dim().expect("context is non-empty");
    if sample.target.dim() != Some(dim) {
        return Err(shape_err!("target frames do not match condition dimension {dim}"));
    }
    let mut level_vec = noise_level_vector(spec, levels, t)?.as_slice().to_vec();
    if fixed_buffers {
        for (b, &lvl) in levels.as_slice().iter().enumerate() {
            level_vec[spec.condition + b] = lvl;
        }
    }
    let cond = sample.condition.slice(0, spec.condition)?;
    let buffer_clean = buffer_content(&cond, &sample.condition, spec)?;

    let mut seq = Vec::with_capacity(spec.total());
    let mut eps = Vec::with_capacity(spec.total());
    for f in cond.frames() {
        seq.push(f.clone());
        eps.push(Frame::zeros(dim));
    }
    for (b, clean) in buffer_clean.frames().iter().enumerate() {
        let lvl = level_vec[spec.condition + b];
        let e = rng.gaussian_frame(dim)?;
        seq.push(diffuse_with(clean, &e, sched.alpha(lvl), sched.sigma(lvl)));
        eps.push(e);
    }
    for clean in sample.target.frames() {
        let e = rng.gaussian_frame(dim)?;
        seq.push(diffuse_with(clean, &e, sched.alpha(t), sched.sigma(t)));
        eps.push(e);
    }
    for q in &spec.query_frames {
        seq[q.position] = sample.condition[q.source].clone();
        eps[q.position] = Frame::zeros(dim);
    }
    Ok(TrainInput {
        seq: LatentSequence::new(seq)?,
        eps: LatentSequence::new(eps)?,
        levels: NoiseLevelVector::new(level_vec),
        label: sample.label,
        loss_positions: spec.generated_positions(),
    })
}

/// Every frame at `t`, loss over every frame.
pub fn build_pretrain_input(
    clip: &PretrainClip,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TrainInput> {
    if t == 0 || t > sched.steps() {
        return Err(invalid!("training timestep {t} outside 1..={}", sched.steps()));
    }
    let dim = clip.frames.dim().ok_or_else(|| invalid!("empty pretraining clip"))?;
    let mut seq = Vec::with_capacity(clip.frames.len());
    let mut eps = Vec::with_capacity(clip.frames.len());
    for f in clip.frames.frames() {
        let e = rng.gaussian_frame(dim)?;
        seq.push(diffuse_with(f, &e, sched.alpha(t), sched.sigma(t)));
        eps.push(e);
    }
    Ok(TrainInput {
        seq: LatentSequence::new(seq)?,
        eps: LatentSequence::new(eps)?,
        levels: NoiseLevelVector::homogeneous(clip.frames.len(), t),
        label: clip.label,
        loss_positions: (0..clip.frames.len()).collect(),
    })
}

/// One Adam step on the batch-mean loss. Returns the pre-update loss.
pub fn step_on_inputs(
    params: &mut DenoiserParams,
    opt: &mut OptimizerState,
    inputs: &[TrainInput],
    grad_clip: f64,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut grads = params.zero_gradients();
    let mut loss = 0.0;
    let inv = 1.0 / inputs.len() as f64;
    for input in inputs {
        let cache = params.forward_cached(&input.seq, &input.levels, input.label)?;
        let pred = cache.output();
        loss += inv * loss_over(&input.eps, pred, &input.loss_positions)?;
        let mut up = loss_over_grad(&input.eps, pred, &input.loss_positions)?;
        for f in up.frames_mut() {
            for v in f.as_mut_slice() {
                *v *= inv;
            }
        }
        params.backward_from_cache(&cache, &up, &mut grads)?;
    }
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradient at optimizer step {} (loss {loss})",
            opt.step
        )));
    }
    if grad_clip > 0.0 {
        let norm = grads
            .tensors
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > grad_clip {
            let s = grad_clip / norm;
            grads.tensors.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    opt.update(params, &grads);
    Ok(loss)
}

/// One fine-tuning step: each sample draws `t ~ U{1..T}` and fresh noise.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut DenoiserParams,
    opt: &mut OptimizerState,
    batch: &[&TrainSample],
    spec: &LayoutSpec,
    levels: &BufferLevels,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let base = Rng::new(rng.next_u64());
    let inputs = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = base.substream(i as u64);
            let t = r.int_inclusive(1, sched.steps());
            build_train_input_with(s, spec, levels, t, sched, &mut r, cfg.fixed_buffer_levels)
        })
        .collect::<Result<Vec<_>>>()?;
    step_on_inputs(params, opt, &inputs, cfg.grad_clip)
}

fn pretrain_step(
    params: &mut DenoiserParams,
    opt: &mut OptimizerState,
    batch: &[&PretrainClip],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &TrainConfig,
) -> Result<f64> {
    let base = Rng::new(rng.next_u64());
    let inputs = batch
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut r = base.substream(i as u64);
            let t = r.int_inclusive(1, sched.steps());
            build_pretrain_input(c, t, sched, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    step_on_inputs(params, opt, &inputs, cfg.grad_clip)
}

fn draw_batch<'a, T>(data: &'a [T], size: usize, rng: &mut Rng) -> Vec<&'a T> {
    (0..size)
        .map(|_| &data[rng.int_inclusive(0, data.len() - 1)])
        .collect()
}

/// Trains from scratch (or resumes a pretraining checkpoint) with every frame
/// at one shared noise level and the loss over all frames.
pub fn pretrain(
    dataset: &[PretrainClip],
    steps: usize,
    model: &DenoiserConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    resume: Option<Checkpoint>,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    if dataset.is_empty() {
        return Err(invalid!("pretraining dataset is empty"));
    }
    cfg.validate()?;
    let mut ckpt = match resume {
        Some(c) => {
            if c.layout.is_some() {
                return Err(invalid!("cannot resume pretraining from a fine-tuned checkpoint"));
            }
            c.check_compatible(model, sched)?;
            c
        }
        None => {
            let params = DenoiserParams::init(model, crate::rng::derive_seed(seed, "init"))?.with_schedule(sched);
            let opt = cfg.optimizer(&params);
            Checkpoint::new(
                params,
                opt,
                0,
                None,
                ScheduleDescriptor::of(sched),
                Rng::for_purpose(seed, "pretrain").state(),
            )
        }
    };
    let mut rng = Rng::from_state(ckpt.rng);
    let mut log = Vec::with_capacity(steps);
    let start = Instant::now();
    for _ in 0..steps {
        ckpt.optimizer.lr = cfg.lr_at(ckpt.step);
        let batch = draw_batch(dataset, cfg.batch_size, &mut rng);
        let loss = pretrain_step(&mut ckpt.params, &mut ckpt.optimizer, &batch, sched, &mut rng, cfg)?;
        log.push(LossRecord {
            step: ckpt.step,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
        });
        ckpt.step += 1;
    }
    ckpt.rng = rng.state();
    Ok((ckpt, log))
}

/// Callback invoked every `eval_every` steps with the current step and
/// parameters.
pub type EvalHook<'a> = &'a mut dyn FnMut(u64, &DenoiserParams) -> Result<()>;

/// Masked-loss fine-tuning.
///
/// From a pretraining checkpoint this starts a fresh optimizer and step
/// counter; from a fine-tuning checkpoint with the same layout it resumes
/// the optimizer, step counter and random stream.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    checkpoint: Checkpoint,
    dataset: &[TrainSample],
    spec: &LayoutSpec,
    levels: &BufferLevels,
    sched: &NoiseSchedule,
    steps: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut eval: Option<(u64, EvalHook<'_>)>,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    cfg.validate()?;
    spec.validate()?;
    checkpoint.check_schedule(sched)?;
    if spec.total() > checkpoint.params.config().max_frames && checkpoint.params.config().has_conditioning() {
        return Err(invalid!(
            "layout of {} frames exceeds the model's position table",
            spec.total()
        ));
    }
    let mut ckpt = match &checkpoint.layout {
        None => {
            let opt = cfg.optimizer(&checkpoint.params);
            Checkpoint::new(
                checkpoint.params,
                opt,
                0,
                Some(spec.clone()),
                ScheduleDescriptor::of(sched),
                Rng::for_purpose(seed, "finetune").state(),
            )
        }
        Some(l) if l == spec => checkpoint,
        Some(l) => {
            return Err(invalid!(
                "checkpoint layout (L={}, B={}, K={}, {}) does not match run layout (L={}, B={}, K={}, {})",
                l.condition, l.buffer, l.target, l.task,
                spec.condition, spec.buffer, spec.target, spec.task
            ))
        }
    };
    if steps > 0 && dataset.is_empty() {
        return Err(invalid!("fine-tuning dataset is empty"));
    }
    let mut rng = Rng::from_state(ckpt.rng);
    let mut log = Vec::with_capacity(steps);
    let start = Instant::now();
    for _ in 0..steps {
        ckpt.optimizer.lr = cfg.lr_at(ckpt.step);
        let batch = draw_batch(dataset, cfg.batch_size, &mut rng);
        let loss = train_step(&mut ckpt.params, &mut ckpt.optimizer, &batch, spec, levels, sched, &mut rng, cfg)?;
        log.push(LossRecord {
            step: ckpt.step,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
        });
        ckpt.step += 1;
        if let Some((every, hook)) = eval.as_mut() {
            if *every > 0 && ckpt.step % *every == 0 {
                hook(ckpt.step, &ckpt.params)?;
            }
        }
    }
    ckpt.rng = rng.state();
    Ok((ckpt, log))
}

//! Active-set inference and the baseline samplers.
//!
//! At each grid step only the frames whose level equals the current global
//! step are updated. Buffer frames start at their own (grid-snapped) levels
//! and join the active set when the global step reaches them, after which
//! they move down together with the targets.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, LabelCondition};
use crate::error::{invalid, shape_err, Result};
use crate::frame::{Frame, LatentSequence};
use crate::layout::{
    buffer_content, check_context, compose_initial, noise_level_vector, BufferLevels, LayoutSpec,
    NoiseLevelVector,
};
use crate::rng::Rng;
use crate::schedule::{diffuse_with, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Deterministic, eta = 0.
    Ddim,
    /// Ancestral sampling from the strided posterior.
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of denoising steps.
    pub steps: usize,
    pub mode: SamplerMode,
    /// Clamp the predicted clean frame to [-1, 1] before stepping.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            mode: SamplerMode::Ddim,
            clip_x0: true,
        }
    }
}

/// Strictly decreasing timesteps `t_N > ... > t_1 >= 1`, starting at `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerGrid(Vec<usize>);

impl SamplerGrid {
    /// `t_i = round(i * T / N)` for `i = N..1`, ties down. `N` is capped at `T`.
    pub fn new(steps: usize, horizon: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("sampler grid needs at least one step"));
        }
        if horizon == 0 {
            return Err(invalid!("sampler grid needs T >= 1"));
        }
        let n = steps.min(horizon) as u64;
        let t = horizon as u64;
        let grid = (1..=n)
            .rev()
            .map(|i| {
                let (q, r) = ((i * t) / n, (i * t) % n);
                (if 2 * r > n { q + 1 } else { q }) as usize
            })
            .collect();
        Ok(SamplerGrid(grid))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Pairs `(t_cur, t_next)`, the last ending at 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.0.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Indices whose level equals `t`.
pub fn active_set(levels: &NoiseLevelVector, t: usize) -> Vec<usize> {
    (0..levels.len()).filter(|&i| levels[i] == t).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub t: usize,
    /// Realized per-frame levels before the update.
    pub levels: Vec<usize>,
    pub active: Vec<usize>,
    /// Per-frame L2 norm before the update.
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub buffer: usize,
    pub frames: usize,
    pub steps: Vec<TraceStep>,
    /// Full sequences before each step, when requested.
    pub snapshots: Vec<LatentSequence>,
    /// Final internal sequence.
    pub final_sequence: LatentSequence,
}

impl SampleTrace {
    fn record(&mut self, step: usize, t: usize, seq: &LatentSequence, levels: &NoiseLevelVector, active: &[usize], keep: bool) {
        self.steps.push(TraceStep {
            step,
            t,
            levels: levels.as_slice().to_vec(),
            active: active.to_vec(),
            norms: seq.frames().iter().map(Frame::norm).collect(),
        });
        if keep {
            self.snapshots.push(seq.clone());
        }
    }

    /// `step,t,active,norm_0..norm_{n-1}`; `active` is one 0/1 character per
    /// frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,active");
        for i in 0..self.frames {
            out.push_str(&format!(",norm_{i}"));
        }
        out.push('\n');
        for s in &self.steps {
            let mask: String = (0..self.frames)
                .map(|i| if s.active.contains(&i) { '1' } else { '0' })
                .collect();
            out.push_str(&format!("{},{},{}", s.step, s.t, mask));
            for n in &s.norms {
                out.push_str(&format!(",{n}"));
            }
            out.push('\n');
        }
        out
    }

    /// Whether every index, once active, stays active at all later steps.
    pub fn active_sets_nested(&self) -> bool {
        self.steps
            .windows(2)
            .all(|w| w[0].active.iter().all(|i| w[1].active.contains(i)))
    }
}

fn predict_x0(z: &Frame, eps: &Frame, alpha: f64, sigma: f64, clip: bool) -> (Frame, Frame) {
    let mut x0: Vec<f64> = z
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(z, e)| (z - sigma * e) / alpha)
        .collect();
    if !clip {
        return (Frame::new(x0), eps.clone());
    }
    for v in &mut x0 {
        *v = v.clamp(-1.0, 1.0);
    }
    let eps = z
        .as_slice()
        .iter()
        .zip(&x0)
        .map(|(z, x)| (z - alpha * x) / sigma)
        .collect();
    (Frame::new(x0), Frame::new(eps))
}

/// Moves one frame from `t_cur` to `t_next` given a noise prediction.
fn step_frame(
    z: &Frame,
    eps_hat: &Frame,
    t_cur: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Frame> {
    let (a, s) = (sched.alpha(t_cur), sched.sigma(t_cur));
    let (a2, s2) = (sched.alpha(t_next), sched.sigma(t_next));
    let (x0, eps) = predict_x0(z, eps_hat, a, s, cfg.clip_x0);
    match cfg.mode {
        SamplerMode::Ddim => Ok(diffuse_with(&x0, &eps, a2, s2)),
        SamplerMode::Ddpm => {
            // Posterior q(z_next | z_cur, x0) for a strided step.
            let ratio = a / a2;
            let var_step = (s * s - ratio * ratio * s2 * s2).max(0.0);
            let c_z = ratio * s2 * s2 / (s * s);
            let c_x = a2 * var_step / (s * s);
            let std = (var_step * s2 * s2 / (s * s)).sqrt();
            let noise = if std > 0.0 {
                rng.gaussian_frame(z.len())?
            } else {
                Frame::zeros(z.len())
            };
            let out = z
                .as_slice()
                .iter()
                .zip(x0.as_slice())
                .zip(noise.as_slice())
                .map(|((z, x), n)| c_z * z + c_x * x + std * n)
                .collect();
            Ok(Frame::new(out))
        }
    }
}

/// One update of the frames at level `t_cur`; all other frames are returned
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn sampler_step<D: Denoiser + ?Sized>(
    model: &D,
    seq: &LatentSequence,
    levels: &NoiseLevelVector,
    t_cur: usize,
    t_next: usize,
    label: LabelCondition,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<LatentSequence> {
    if t_cur <= t_next {
        return Err(invalid!("sampler step must descend, got {t_cur} -> {t_next}"));
    }
    sched.check_t(t_cur)?;
    if seq.len() != levels.len() {
        return Err(shape_err!(
            "{} frames but {} noise levels",
            seq.len(),
            levels.len()
        ));
    }
    let active = active_set(levels, t_cur);
    if active.is_empty() {
        return Err(invalid!("no frame is at level {t_cur}"));
    }
    let eps_hat = model.predict(seq, levels, label)?;
    let mut out = seq.clone();
    for i in active {
        out[i] = step_frame(&seq[i], &eps_hat[i], t_cur, t_next, sched, cfg, rng)?;
    }
    Ok(out)
}

/// Runs the grid from a composed initial state; `levels` are already snapped.
#[allow(clippy::too_many_arguments)]
fn run_active_set<D: Denoiser + ?Sized>(
    model: &D,
    mut seq: LatentSequence,
    spec: &LayoutSpec,
    levels: &BufferLevels,
    label: LabelCondition,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    keep_snapshots: bool,
) -> Result<(LatentSequence, SampleTrace)> {
    let mut trace = SampleTrace {
        buffer: spec.buffer,
        frames: spec.total(),
        ..Default::default()
    };
    let mut realized = noise_level_vector(spec, levels, grid.as_slice()[0])?;
    for (step, (t_cur, t_next)) in grid.transitions().enumerate() {
        let active = active_set(&realized, t_cur);
        trace.record(step, t_cur, &seq, &realized, &active, keep_snapshots);
        seq = sampler_step(model, &seq, &realized, t_cur, t_next, label, sched, cfg, rng)?;
        let mut next = realized.as_slice().to_vec();
        for i in active {
            next[i] = t_next;
        }
        realized = NoiseLevelVector::new(next);
    }
    let out = seq.slice(spec.target_start(), spec.total())?;
    trace.final_sequence = seq;
    Ok((out, trace))
}

fn check_grid(grid: &SamplerGrid, sched: &NoiseSchedule) -> Result<()> {
    if grid.as_slice().first() != Some(&sched.steps()) {
        return Err(invalid!("sampler grid must start at T={}", sched.steps()));
    }
    Ok(())
}

/// Active-set inference. `context` holds the clean condition frames (and any
/// buffer-source or query frames); `levels` are the unsnapped initial buffer
/// levels. Returns the `K` target frames.
#[allow(clippy::too_many_arguments)]
pub fn tic_inference<D: Denoiser + ?Sized>(
    model: &D,
    context: &LatentSequence,
    spec: &LayoutSpec,
    levels: &BufferLevels,
    label: LabelCondition,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    keep_snapshots: bool,
) -> Result<(LatentSequence, SampleTrace)> {
    check_grid(grid, sched)?;
    check_context(context, spec)?;
    let snapped = levels.snap_to_grid(grid.as_slice());
    let cond = context.slice(0, spec.condition)?;
    let buffer_clean = buffer_content(&cond, context, spec)?;
    let seq = compose_initial(context, &buffer_clean, spec, &snapped, sched, rng)?;
    run_active_set(model, seq, spec, &snapped, label, grid, sched, cfg, rng, keep_snapshots)
}

/// Active-set inference with the buffer removed: condition frames sit
/// directly before the targets.
#[allow(clippy::too_many_arguments)]
pub fn baseline_no_buffer<D: Denoiser + ?Sized>(
    model: &D,
    context: &LatentSequence,
    spec: &LayoutSpec,
    label: LabelCondition,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    keep_snapshots: bool,
) -> Result<(LatentSequence, SampleTrace)> {
    let bare = spec.without_buffer();
    tic_inference(
        model,
        context,
        &bare,
        &BufferLevels::from_levels(vec![]),
        label,
        grid,
        sched,
        cfg,
        rng,
        keep_snapshots,
    )
}

/// Replacement sampling: every frame at the shared level, with the
/// condition (and query) slots overwritten after each step by the clean
/// frames noised to the next level.
#[allow(clippy::too_many_arguments)]
pub fn baseline_replace<D: Denoiser + ?Sized>(
    model: &D,
    context: &LatentSequence,
    spec: &LayoutSpec,
    label: LabelCondition,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
    keep_snapshots: bool,
) -> Result<(LatentSequence, SampleTrace)> {
    check_grid(grid, sched)?;
    check_context(context, spec)?;
    let dim = context.dim().expect("context checked non-empty");
    let cond = context.slice(0, spec.condition)?;
    let buffer_clean = buffer_content(&cond, context, spec)?;
    let big_t = sched.steps();
    let mut pinned: Vec<(usize, Frame)> = cond.frames().iter().cloned().enumerate().collect();
    pinned.extend(spec.query_frames.iter().map(|q| (q.position, context[q.source].clone())));

    let mut frames = Vec::with_capacity(spec.total());
    for f in cond.frames() {
        frames.push(diffuse_with(f, &rng.gaussian_frame(dim)?, sched.alpha(big_t), sched.sigma(big_t)));
    }
    for f in buffer_clean.frames() {
        frames.push(diffuse_with(f, &rng.gaussian_frame(dim)?, sched.alpha(big_t), sched.sigma(big_t)));
    }
    for _ in 0..spec.target {
        frames.push(rng.gaussian_frame(dim)?);
    }
    for q in &spec.query_frames {
        let clean = &context[q.source];
        frames[q.position] = diffuse_with(clean, &rng.gaussian_frame(dim)?, sched.alpha(big_t), sched.sigma(big_t));
    }
    let mut seq = LatentSequence::new(frames)?;
    let mut trace = SampleTrace {
        buffer: spec.buffer,
        frames: spec.total(),
        ..Default::default()
    };
    for (step, (t_cur, t_next)) in grid.transitions().enumerate() {
        let levels = NoiseLevelVector::homogeneous(spec.total(), t_cur);
        let all: Vec<usize> = (0..spec.total()).collect();
        trace.record(step, t_cur, &seq, &levels, &all, keep_snapshots);
        seq = sampler_step(model, &seq, &levels, t_cur, t_next, label, sched, cfg, rng)?;
        for (pos, clean) in &pinned {
            seq[*pos] = if t_next == 0 {
                clean.clone()
            } else {
                diffuse_with(clean, &rng.gaussian_frame(dim)?, sched.alpha(t_next), sched.sigma(t_next))
            };
        }
    }
    let out = seq.slice(spec.target_start(), spec.total())?;
    trace.final_sequence = seq;
    Ok((out, trace))
}

/// Standard homogeneous-level sampling of `frames` frames from noise.
#[allow(clippy::too_many_arguments)]
pub fn sample_unconditional<D: Denoiser + ?Sized>(
    model: &D,
    frames: usize,
    dim: usize,
    label: LabelCondition,
    grid: &SamplerGrid,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<LatentSequence> {
    check_grid(grid, sched)?;
    if frames == 0 {
        return Err(invalid!("cannot sample an empty sequence"));
    }
    let mut seq = (0..frames)
        .map(|_| rng.gaussian_frame(dim))
        .collect::<Result<LatentSequence>>()?;
    for (t_cur, t_next) in grid.transitions() {
        let levels = NoiseLevelVector::homogeneous(frames, t_cur);
        seq = sampler_step(model, &seq, &levels, t_cur, t_next, label, sched, cfg, rng)?;
    }
    Ok(seq)
}

/// A denoiser that knows the clean sequence and returns the exact noise
/// `(z - alpha * x0) / sigma` for every noised frame (zero for clean ones).
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub clean: LatentSequence,
    pub sched: NoiseSchedule,
}

impl OracleDenoiser {
    /// Clean sequence for a layout: condition, clean buffer content, then
    /// the ground-truth targets.
    pub fn for_layout(
        context: &LatentSequence,
        target: &LatentSequence,
        spec: &LayoutSpec,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let cond = context.slice(0, spec.condition)?;
        let buffer = buffer_content(&cond, context, spec)?;
        Ok(Self {
            clean: LatentSequence::concat(&[&cond, &buffer, target])?,
            sched: sched.clone(),
        })
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        _label: LabelCondition,
    ) -> Result<LatentSequence> {
        if seq.len() != self.clean.len() || levels.len() != seq.len() {
            return Err(shape_err!("oracle built for {} frames, got {}", self.clean.len(), seq.len()));
        }
        let mut out = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let t = levels[i];
            if t == 0 {
                out.push(Frame::zeros(seq[i].len()));
                continue;
            }
            let (a, s) = (self.sched.alpha(t), self.sched.sigma(t));
            out.push(Frame::new(
                seq[i]
                    .as_slice()
                    .iter()
                    .zip(self.clean[i].as_slice())
                    .map(|(z, x)| (z - a * x) / s)
                    .collect(),
            ));
        }
        LatentSequence::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, DenoiserParams};
    use crate::layout::{buffer_levels, preset_layout, BufferMode, BufferPolicy, Task};
    use crate::schedule::{build_schedule, forward_diffuse, ScheduleKind};

    fn bounded_seq(n: usize, dim: usize, rng: &mut Rng) -> LatentSequence {
        (0..n)
            .map(|_| Frame::new((0..dim).map(|_| rng.uniform_range(-0.9, 0.9)).collect()))
            .collect()
    }

    #[test]
    fn grid_shape() {
        let g = SamplerGrid::new(50, 1000).unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g.as_slice()[0], 1000);
        assert_eq!(g.as_slice()[1], 980);
        assert_eq!(*g.as_slice().last().unwrap(), 20);
        assert!(g.as_slice().windows(2).all(|w| w[0] > w[1]));
        let g = SamplerGrid::new(50, 10).unwrap();
        assert_eq!(g.as_slice(), &[10, 9, 8, 7, 6, 5, 4, 3, 2, 1]);
        let g = SamplerGrid::new(3, 10).unwrap();
        assert_eq!(g.as_slice(), &[10, 7, 3]);
        let t: Vec<_> = g.transitions().collect();
        assert_eq!(t, vec![(10, 7), (7, 3), (3, 0)]);
    }

    #[test]
    fn active_set_examples() {
        let v = NoiseLevelVector::new(vec![0, 250, 500, 1000, 1000]);
        assert_eq!(active_set(&v, 1000), vec![3, 4]);
        let v = NoiseLevelVector::new(vec![0, 250, 500, 600, 600, 600]);
        assert_eq!(active_set(&v, 600), vec![3, 4, 5]);
        let v = NoiseLevelVector::new(vec![0, 250, 500, 500, 500, 500]);
        assert_eq!(active_set(&v, 500), vec![2, 3, 4, 5]);
        let v = NoiseLevelVector::new(vec![3, 5, 7]);
        assert!(active_set(&v, 0).is_empty());
    }

    #[test]
    fn ddim_oracle_step_identity() {
        let sched = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let mut rng = Rng::new(1);
        let x0 = bounded_seq(2, 16, &mut rng);
        let eps: LatentSequence = (0..2).map(|_| rng.gaussian_frame(16).unwrap()).collect();
        let z: LatentSequence = (0..2)
            .map(|i| forward_diffuse(&x0[i], 700, &eps[i], &sched).unwrap())
            .collect();
        let oracle = OracleDenoiser { clean: x0.clone(), sched: sched.clone() };
        let levels = NoiseLevelVector::homogeneous(2, 700);
        let cfg = SamplerConfig { clip_x0: false, ..Default::default() };
        let out = sampler_step(&oracle, &z, &levels, 700, 400, LabelCondition(0), &sched, &cfg, &mut rng).unwrap();
        for i in 0..2 {
            let want = forward_diffuse(&x0[i], 400, &eps[i], &sched).unwrap();
            for (a, b) in out[i].as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inactive_frames_untouched_and_errors() {
        let sched = build_schedule(100, ScheduleKind::LinearBeta).unwrap();
        let mut rng = Rng::new(2);
        let seq = bounded_seq(4, 8, &mut rng);
        let oracle = OracleDenoiser { clean: seq.clone(), sched: sched.clone() };
        let levels = NoiseLevelVector::new(vec![0, 30, 60, 60]);
        let cfg = SamplerConfig::default();
        let out = sampler_step(&oracle, &seq, &levels, 60, 40, LabelCondition(0), &sched, &cfg, &mut rng).unwrap();
        assert_eq!(out[0], seq[0]);
        assert_eq!(out[1], seq[1]);
        assert!(sampler_step(&oracle, &seq, &levels, 50, 40, LabelCondition(0), &sched, &cfg, &mut rng).is_err());
        assert!(sampler_step(&oracle, &seq, &levels, 40, 40, LabelCondition(0), &sched, &cfg, &mut rng).is_err());
    }

    #[test]
    fn ddpm_final_step_is_noise_free() {
        let sched = build_schedule(100, ScheduleKind::Cosine).unwrap();
        let mut rng = Rng::new(3);
        let x0 = bounded_seq(1, 8, &mut rng);
        let eps = LatentSequence::new(vec![rng.gaussian_frame(8).unwrap()]).unwrap();
        let z = LatentSequence::new(vec![forward_diffuse(&x0[0], 5, &eps[0], &sched).unwrap()]).unwrap();
        let oracle = OracleDenoiser { clean: x0.clone(), sched: sched.clone() };
        let cfg = SamplerConfig { mode: SamplerMode::Ddpm, clip_x0: false, ..Default::default() };
        let out = sampler_step(&oracle, &z, &NoiseLevelVector::homogeneous(1, 5), 5, 0, LabelCondition(0), &sched, &cfg, &mut rng).unwrap();
        for (a, b) in out[0].as_slice().iter().zip(x0[0].as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_inference_recovers_targets_on_presets() {
        let sched = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let grid = SamplerGrid::new(50, 1000).unwrap();
        for task in Task::ALL {
            let spec = preset_layout(task);
            let mut rng = Rng::new(task.id() as u64);
            let ctx_len = spec.condition + if spec.buffer_mode == BufferMode::ContinueSource { spec.buffer } else { 0 };
            let ctx_len = ctx_len.max(spec.query_frames.iter().map(|q| q.source + 1).max().unwrap_or(0));
            let context = bounded_seq(ctx_len, 8, &mut rng);
            let mut target = bounded_seq(spec.target, 8, &mut rng);
            for q in &spec.query_frames {
                target[q.position - spec.target_start()] = context[q.source].clone();
            }
            let oracle = OracleDenoiser::for_layout(&context, &target, &spec, &sched).unwrap();
            let lv = buffer_levels(spec.buffer, 1000, BufferPolicy::Uniform).unwrap();
            let (out, trace) = tic_inference(
                &oracle, &context, &spec, &lv, LabelCondition(0), &grid, &sched,
                &SamplerConfig::default(), &mut rng, false,
            )
            .unwrap();
            let mse: f64 = (0..spec.target)
                .map(|k| out[k].squared_distance(&target[k]).unwrap())
                .sum::<f64>()
                / (spec.target * 8) as f64;
            assert!(mse < 1e-12, "{task}: {mse}");
            assert!(trace.active_sets_nested());
            for i in 0..spec.condition {
                assert_eq!(trace.final_sequence[i], context[i]);
            }
        }
    }

    #[test]
    fn realized_levels_follow_level_vector() {
        let sched = build_schedule(1000, ScheduleKind::LinearBeta).unwrap();
        let grid = SamplerGrid::new(50, 1000).unwrap();
        let spec = LayoutSpec::new(2, 3, 2, BufferMode::ReplicateLast, vec![], Task::I2v).unwrap();
        let lv = buffer_levels(3, 1000, BufferPolicy::Uniform).unwrap();
        let snapped = lv.snap_to_grid(grid.as_slice());
        let mut rng = Rng::new(4);
        let context = bounded_seq(2, 4, &mut rng);
        let target = bounded_seq(2, 4, &mut rng);
        let oracle = OracleDenoiser::for_layout(&context, &target, &spec, &sched).unwrap();
        let (_, trace) = tic_inference(&oracle, &context, &spec, &lv, LabelCondition(0), &grid, &sched, &SamplerConfig::default(), &mut rng, true).unwrap();
        assert_eq!(trace.steps.len(), 50);
        assert_eq!(trace.snapshots.len(), 50);
        for s in &trace.steps {
            assert_eq!(s.levels, noise_level_vector(&spec, &snapped, s.t).unwrap().as_slice());
        }
        // Buffer frame at 240 joins at t = 240.
        let join = trace.steps.iter().find(|s| s.active.contains(&2)).unwrap();
        assert_eq!(join.t, 240);
        let csv = trace.to_csv();
        assert!(csv.starts_with("step,t,active,norm_0"));
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1000,0000011,"));
    }

    #[test]
    fn baselines_behave() {
        let sched = build_schedule(200, ScheduleKind::LinearBeta).unwrap();
        let grid = SamplerGrid::new(10, 200).unwrap();
        let cfgm = DenoiserConfig { frame_dim: 4, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, n_labels: 2, max_frames: 16, data_std: 0.25 };
        let model = DenoiserParams::init(&cfgm, 1).unwrap().with_schedule(&sched);
        let spec = preset_layout(Task::I2v);
        let lv = buffer_levels(spec.buffer, 200, BufferPolicy::Uniform).unwrap();
        let context = bounded_seq(1, 4, &mut Rng::new(5));
        let cfg = SamplerConfig::default();
        let (a, _) = tic_inference(&model, &context, &spec, &lv, LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(6), false).unwrap();
        let (a2, _) = tic_inference(&model, &context, &spec, &lv, LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(6), false).unwrap();
        assert_eq!(a, a2);
        let (r, rt) = baseline_replace(&model, &context, &spec, LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(6), false).unwrap();
        assert_eq!(r.len(), spec.target);
        assert_ne!(a, r);
        assert_eq!(rt.final_sequence[0], context[0]);
        let (n, nt) = baseline_no_buffer(&model, &context, &spec, LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(6), false).unwrap();
        assert_eq!(nt.buffer, 0);
        assert_eq!(nt.final_sequence.len(), spec.condition + spec.target);
        let b0 = spec.with_buffer(0);
        let (z, _) = tic_inference(&model, &context, &b0, &BufferLevels::from_levels(vec![]), LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(6), false).unwrap();
        assert_eq!(n, z);
        let u = sample_unconditional(&model, 5, 4, LabelCondition(0), &grid, &sched, &cfg, &mut Rng::new(7)).unwrap();
        assert_eq!(u.len(), 5);
        assert!(u.is_finite());
    }
}

//! Condition / buffer / target partitioning of a frame sequence and the
//! per-frame noise levels that go with it.
//!
//! A sequence of `L + B + K` frames is laid out as `L` clean condition
//! frames, `B` buffer frames whose levels ramp from 0 towards `T`, and `K`
//! target frames at the global timestep. At global step `t` a buffer frame
//! sits at `min(level_b, t)`, so buffers join the target frames as `t`
//! falls past their initial level.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::frame::LatentSequence;
use crate::rng::Rng;
use crate::schedule::{diffuse_with, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    I2v,
    StyleTransfer,
    ActionTransfer,
    KeyframeInterp,
    MultiCond,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::I2v,
        Task::StyleTransfer,
        Task::ActionTransfer,
        Task::KeyframeInterp,
        Task::MultiCond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::I2v => "i2v",
            Task::StyleTransfer => "style-transfer",
            Task::ActionTransfer => "action-transfer",
            Task::KeyframeInterp => "keyframe-interp",
            Task::MultiCond => "multi-cond",
        }
    }

    pub fn id(self) -> u32 {
        match self {
            Task::I2v => 0,
            Task::StyleTransfer => 1,
            Task::ActionTransfer => 2,
            Task::KeyframeInterp => 3,
            Task::MultiCond => 4,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| invalid!("unknown task id {id}"))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| invalid!("unknown task '{s}'"))
    }
}

/// What clean content the buffer frames start from before noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferMode {
    /// `B` copies of the last condition frame.
    ReplicateLast,
    /// Source frames `L+1..=L+B`, i.e. the clip keeps playing.
    ContinueSource,
}

/// A clean frame pinned inside the target region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFrame {
    /// Absolute position in the `L+B+K` sequence.
    pub position: usize,
    /// Index into the sample's clean context frames.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub condition: usize,
    pub buffer: usize,
    pub target: usize,
    pub buffer_mode: BufferMode,
    #[serde(default)]
    pub query_frames: Vec<QueryFrame>,
    pub task: Task,
}

impl LayoutSpec {
    pub fn new(
        condition: usize,
        buffer: usize,
        target: usize,
        buffer_mode: BufferMode,
        query_frames: Vec<QueryFrame>,
        task: Task,
    ) -> Result<Self> {
        let spec = Self {
            condition,
            buffer,
            target,
            buffer_mode,
            query_frames,
            task,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.condition == 0 {
            return Err(invalid!("layout needs at least one condition frame"));
        }
        if self.target == 0 {
            return Err(invalid!("layout needs at least one target frame"));
        }
        let start = self.target_start();
        for q in &self.query_frames {
            if q.position < start || q.position >= self.total() {
                return Err(invalid!(
                    "query position {} outside target region {start}..{}",
                    q.position,
                    self.total()
                ));
            }
        }
        let mut pos: Vec<usize> = self.query_frames.iter().map(|q| q.position).collect();
        pos.sort_unstable();
        pos.dedup();
        if pos.len() != self.query_frames.len() {
            return Err(invalid!("duplicate query positions"));
        }
        if pos.len() >= self.target {
            return Err(invalid!("query frames leave no target frame to generate"));
        }
        Ok(())
    }

    /// `L + B + K`.
    pub fn total(&self) -> usize {
        self.condition + self.buffer + self.target
    }

    pub fn target_start(&self) -> usize {
        self.condition + self.buffer
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.target_start()..self.total()
    }

    pub fn buffer_range(&self) -> std::ops::Range<usize> {
        self.condition..self.target_start()
    }

    pub fn is_query(&self, position: usize) -> bool {
        self.query_frames.iter().any(|q| q.position == position)
    }

    /// Target positions the model actually generates (query slots excluded).
    pub fn generated_positions(&self) -> Vec<usize> {
        self.target_range().filter(|&i| !self.is_query(i)).collect()
    }

    /// The same layout with the buffer removed; query positions shift left.
    pub fn without_buffer(&self) -> LayoutSpec {
        self.with_buffer(0)
    }

    /// The same layout with `buffer` buffer frames. Query positions keep
    /// their offset from the target start.
    pub fn with_buffer(&self, buffer: usize) -> LayoutSpec {
        let old_start = self.target_start();
        let new_start = self.condition + buffer;
        LayoutSpec {
            buffer,
            query_frames: self
                .query_frames
                .iter()
                .map(|q| QueryFrame {
                    position: q.position - old_start + new_start,
                    source: q.source,
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Per-task layouts. Every preset spans 13 frames.
pub fn preset_layout(task: Task) -> LayoutSpec {
    use BufferMode::*;
    let (l, b, k, mode, query) = match task {
        Task::I2v => (1, 3, 9, ReplicateLast, vec![]),
        Task::StyleTransfer => (4, 3, 6, ContinueSource, vec![]),
        // Six reference frames, then the query frame pinned at the start of
        // the target region, then six generated frames.
        Task::ActionTransfer => (
            6,
            0,
            7,
            ReplicateLast,
            vec![QueryFrame {
                position: 6,
                source: 6,
            }],
        ),
        Task::KeyframeInterp => (4, 3, 6, ReplicateLast, vec![]),
        Task::MultiCond => (4, 3, 6, ReplicateLast, vec![]),
    };
    LayoutSpec::new(l, b, k, mode, query, task).expect("presets are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BufferPolicy {
    /// `b / (B+1) * T`.
    Uniform,
    /// Every buffer frame at one absolute level.
    Constant(usize),
    /// Quadratic profile bent towards 0 (`u^2`).
    Concave,
    /// Quadratic profile bent towards `T` (`2u - u^2`).
    Convex,
}

/// Initial buffer levels, one per buffer frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BufferLevels(Vec<usize>);

impl BufferLevels {
    pub fn from_levels(levels: Vec<usize>) -> Self {
        BufferLevels(levels)
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

    /// Snaps each level to the nearest value in `grid`, ties going to the
    /// smaller grid value.
    pub fn snap_to_grid(&self, grid: &[usize]) -> BufferLevels {
        BufferLevels(
            self.0
                .iter()
                .map(|&lvl| {
                    *grid
                        .iter()
                        .min_by_key(|&&g| (g.abs_diff(lvl), g))
                        .unwrap_or(&lvl)
                })
                .collect(),
        )
    }
}

/// `num / den` rounded to nearest, ties down.
fn round_ratio(num: u64, den: u64) -> usize {
    let (q, r) = (num / den, num % den);
    (if 2 * r > den { q + 1 } else { q }) as usize
}

pub fn buffer_levels(buffer: usize, steps: usize, policy: BufferPolicy) -> Result<BufferLevels> {
    if steps < 2 {
        return Err(invalid!("buffer levels need T >= 2, got {steps}"));
    }
    if buffer == 0 {
        if let BufferPolicy::Constant(c) = policy {
            check_constant(c, steps)?;
        }
        return Ok(BufferLevels(Vec::new()));
    }
    let n = (buffer + 1) as u64;
    let big_t = steps as u64;
    let levels = match policy {
        BufferPolicy::Constant(c) => {
            check_constant(c, steps)?;
            vec![c; buffer]
        }
        _ if buffer >= steps => {
            return Err(invalid!(
                "{buffer} strictly increasing buffer levels do not fit in (0, {steps})"
            ));
        }
        BufferPolicy::Uniform => (1..=buffer as u64)
            .map(|b| round_ratio(b * big_t, n))
            .collect(),
        BufferPolicy::Concave | BufferPolicy::Convex => {
            let raw: Vec<usize> = (1..=buffer as u64)
                .map(|b| {
                    let num = if policy == BufferPolicy::Concave {
                        b * b
                    } else {
                        2 * b * n - b * b
                    };
                    round_ratio(num * big_t, n * n)
                })
                .collect();
            make_strict(raw, steps)
        }
    };
    Ok(BufferLevels(levels))
}

fn check_constant(c: usize, steps: usize) -> Result<()> {
    if c == 0 || c >= steps {
        return Err(invalid!("constant buffer level {c} outside (0, {steps})"));
    }
    Ok(())
}

/// Pushes rounded levels apart so they are strictly increasing inside
/// `[1, T-1]`. Requires `len < T`.
fn make_strict(mut levels: Vec<usize>, steps: usize) -> Vec<usize> {
    let n = levels.len();
    let mut floor = 1;
    for lvl in levels.iter_mut() {
        *lvl = (*lvl).max(floor);
        floor = *lvl + 1;
    }
    for (i, lvl) in levels.iter_mut().enumerate().rev() {
        *lvl = (*lvl).min(steps - (n - i));
    }
    levels
}

/// Per-frame noise levels at global step `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NoiseLevelVector(Vec<usize>);

impl NoiseLevelVector {
    pub fn new(levels: Vec<usize>) -> Self {
        NoiseLevelVector(levels)
    }

    /// Every frame at `t`.
    pub fn homogeneous(len: usize, t: usize) -> Self {
        NoiseLevelVector(vec![t; len])
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

    pub fn max(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }
}

impl std::ops::Index<usize> for NoiseLevelVector {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

/// `[0; L] ++ [min(level_b, t); B] ++ [t; K]`, with query positions at 0.
pub fn noise_level_vector(
    spec: &LayoutSpec,
    levels: &BufferLevels,
    t: usize,
) -> Result<NoiseLevelVector> {
    if levels.len() != spec.buffer {
        return Err(shape_err!(
            "{} buffer levels for a layout with {} buffer frames",
            levels.len(),
            spec.buffer
        ));
    }
    let mut out = Vec::with_capacity(spec.total());
    out.extend(std::iter::repeat_n(0, spec.condition));
    out.extend(levels.as_slice().iter().map(|&lvl| lvl.min(t)));
    out.extend(std::iter::repeat_n(t, spec.target));
    for q in &spec.query_frames {
        out[q.position] = 0;
    }
    Ok(NoiseLevelVector(out))
}

/// Clean buffer content before noising.
///
/// `condition` holds the `L` condition frames; `source` is the full clean
/// context the condition was cut from (only read for
/// [`BufferMode::ContinueSource`]).
pub fn buffer_content(
    condition: &LatentSequence,
    source: &LatentSequence,
    spec: &LayoutSpec,
) -> Result<LatentSequence> {
    if condition.len() < spec.condition {
        return Err(invalid!(
            "need {} condition frames, got {}",
            spec.condition,
            condition.len()
        ));
    }
    if spec.buffer == 0 {
        return Ok(LatentSequence::empty());
    }
    match spec.buffer_mode {
        BufferMode::ReplicateLast => {
            let last = condition[spec.condition - 1].clone();
            LatentSequence::new(vec![last; spec.buffer])
        }
        BufferMode::ContinueSource => {
            let need = spec.condition + spec.buffer;
            if source.len() < need {
                return Err(invalid!(
                    "continue-source buffer needs {need} source frames, got {}",
                    source.len()
                ));
            }
            source.slice(spec.condition, need)
        }
    }
}

/// Builds the initial sequence: clean condition frames, buffer frames noised
/// to their levels, and pure-noise targets. Query positions are then filled
/// with their clean context frames.
///
/// `context` is the sample's clean input; its first `L` frames are the
/// condition and query sources index into it.
pub fn compose_initial(
    context: &LatentSequence,
    buffer_clean: &LatentSequence,
    spec: &LayoutSpec,
    levels: &BufferLevels,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentSequence> {
    check_context(context, spec)?;
    if buffer_clean.len() != spec.buffer {
        return Err(shape_err!(
            "{} buffer frames for a layout with {}",
            buffer_clean.len(),
            spec.buffer
        ));
    }
    if levels.len() != spec.buffer {
        return Err(shape_err!(
            "{} buffer levels for a layout with {}",
            levels.len(),
            spec.buffer
        ));
    }
    let dim = context.dim().expect("context checked non-empty");
    if buffer_clean.dim().is_some_and(|d| d != dim) {
        return Err(shape_err!("buffer frames do not match context dimension {dim}"));
    }
    let mut frames = Vec::with_capacity(spec.total());
    frames.extend(context.frames()[..spec.condition].iter().cloned());
    for (clean, &lvl) in buffer_clean.frames().iter().zip(levels.as_slice()) {
        sched.check_t(lvl)?;
        let eps = rng.gaussian_frame(dim)?;
        frames.push(diffuse_with(clean, &eps, sched.alpha(lvl), sched.sigma(lvl)));
    }
    for _ in 0..spec.target {
        frames.push(rng.gaussian_frame(dim)?);
    }
    for q in &spec.query_frames {
        frames[q.position] = context[q.source].clone();
    }
    LatentSequence::new(frames)
}

pub(crate) fn check_context(context: &LatentSequence, spec: &LayoutSpec) -> Result<()> {
    if context.len() < spec.condition {
        return Err(shape_err!(
            "context has {} frames but the layout needs {} condition frames",
            context.len(),
            spec.condition
        ));
    }
    if let Some(q) = spec.query_frames.iter().find(|q| q.source >= context.len()) {
        return Err(shape_err!(
            "query source {} out of range for a context of {} frames",
            q.source,
            context.len()
        ));
    }
    Ok(())
}

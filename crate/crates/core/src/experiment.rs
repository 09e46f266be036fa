//! Run configuration and the pretrain / fine-tune / sample / evaluate
//! pipeline shared by the command line and the acceptance tests.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::frame::LatentSequence;
use crate::layout::{buffer_levels, preset_layout, BufferLevels, BufferPolicy, LayoutSpec, Task};
use crate::metrics::EvalReport;
use crate::rng::{derive_seed, Rng};
use crate::sampling::{
    baseline_no_buffer, baseline_replace, tic_inference, SampleTrace, SamplerConfig, SamplerGrid,
};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tasks::Grid;
use crate::training::{finetune, pretrain, LossRecord, TrainConfig, TrainSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::LinearBeta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub pretrain_count: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            pretrain_count: 2000,
            train_count: 20,
            eval_count: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Everything a run needs. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    /// Overrides the preset's buffer length.
    pub buffer: Option<usize>,
    pub buffer_policy: BufferPolicy,
    /// Level of the constant-level variant, as a percentage of `T`.
    pub constant_level_pct: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub pretrain_batch: usize,
    /// Cosine-decay the learning rate to zero over each training phase.
    pub lr_decay: bool,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::I2v,
            buffer: None,
            buffer_policy: BufferPolicy::Uniform,
            constant_level_pct: 50,
            pretrain_steps: 4000,
            finetune_steps: 2000,
            pretrain_batch: 8,
            lr_decay: true,
            schedule: ScheduleConfig {
                steps: 1000,
                kind: ScheduleKind::Cosine,
            },
            model: DenoiserConfig {
                d_model: 128,
                ..DenoiserConfig::default()
            },
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.pretrain_batch == 0 {
            return Err(invalid!("pretrain_batch must be positive"));
        }
        if !(1..100).contains(&self.constant_level_pct) {
            return Err(invalid!("constant_level_pct must lie in 1..=99"));
        }
        let grid = self.grid()?;
        if grid.dim() != self.model.frame_dim {
            return Err(invalid!(
                "model.frame_dim = {} but the {}x{} grid has {} pixels",
                self.model.frame_dim,
                grid.height,
                grid.width,
                grid.dim()
            ));
        }
        let sched = self.schedule()?;
        self.grid_steps(&sched)?;
        let spec = self.layout()?;
        if self.model.has_conditioning() && spec.total() > self.model.max_frames {
            return Err(invalid!(
                "layout of {} frames exceeds model.max_frames = {}",
                spec.total(),
                self.model.max_frames
            ));
        }
        if self.model.has_conditioning() && crate::tasks::CLIP_FRAMES > self.model.max_frames {
            return Err(invalid!("pretraining clips exceed model.max_frames"));
        }
        for v in Variant::ALL {
            self.buffer_levels_for(v, &spec, &sched)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.data.height, self.data.width)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.steps, self.schedule.kind)
    }

    pub fn grid_steps(&self, sched: &NoiseSchedule) -> Result<SamplerGrid> {
        SamplerGrid::new(self.sampler.steps, sched.steps())
    }

    /// The task preset with the buffer override applied.
    pub fn layout(&self) -> Result<LayoutSpec> {
        let preset = preset_layout(self.task);
        let spec = match self.buffer {
            Some(b) => preset.with_buffer(b),
            None => preset,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn buffer_levels(&self, spec: &LayoutSpec, sched: &NoiseSchedule) -> Result<BufferLevels> {
        buffer_levels(spec.buffer, sched.steps(), self.buffer_policy)
    }

    /// Buffer levels a sampling variant uses.
    pub fn buffer_levels_for(&self, variant: Variant, spec: &LayoutSpec, sched: &NoiseSchedule) -> Result<BufferLevels> {
        let t = sched.steps();
        let policy = match variant {
            Variant::Ticft | Variant::Replace => self.buffer_policy,
            Variant::NoBuffer => return Ok(BufferLevels::from_levels(vec![])),
            Variant::ConstantT => BufferPolicy::Constant((t * self.constant_level_pct / 100).clamp(1, t - 1)),
            Variant::Concave => BufferPolicy::Concave,
            Variant::Convex => BufferPolicy::Convex,
        };
        buffer_levels(spec.buffer, t, policy)
    }

    pub fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }
}

/// Sampling variants compared by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ticft,
    NoBuffer,
    Replace,
    ConstantT,
    Concave,
    Convex,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ticft,
        Variant::NoBuffer,
        Variant::Replace,
        Variant::ConstantT,
        Variant::Concave,
        Variant::Convex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ticft => "ticft",
            Variant::NoBuffer => "no-buffer",
            Variant::Replace => "replace",
            Variant::ConstantT => "constant-t",
            Variant::Concave => "concave",
            Variant::Convex => "convex",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid!("unknown variant '{s}' (expected ticft, no-buffer, replace, constant-t, concave or convex)"))
    }
}

/// Generates the pretraining corpus, train split and eval split for a run.
pub struct RunData {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate_data(cfg: &RunConfig) -> Result<RunData> {
    let (train, eval) = generate_task_data(cfg)?;
    Ok(RunData {
        pretrain: generate_pretrain_data(cfg)?,
        train,
        eval,
    })
}

pub fn generate_pretrain_data(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::generate(None, cfg.data.pretrain_count, cfg.grid()?, cfg.seed_for("data/pretrain"))
}

/// The task's train and eval splits.
pub fn generate_task_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let grid = cfg.grid()?;
    Ok((
        Dataset::generate(Some(cfg.task), cfg.data.train_count, grid, cfg.seed_for("data/train"))?,
        Dataset::generate(Some(cfg.task), cfg.data.eval_count, grid, cfg.seed_for("data/eval"))?,
    ))
}

/// Pretrains until the checkpoint reaches `pretrain_steps` in total, so a
/// resumed run only performs the remaining steps.
pub fn run_pretrain(cfg: &RunConfig, corpus: &Dataset, resume: Option<Checkpoint>) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let sched = cfg.schedule()?;
    let train = TrainConfig {
        batch_size: cfg.pretrain_batch,
        decay_steps: if cfg.lr_decay { cfg.pretrain_steps as u64 } else { cfg.train.decay_steps },
        ..cfg.train.clone()
    };
    let done = resume.as_ref().map_or(0, |c| c.step as usize);
    pretrain(
        &corpus.pretrain_clips()?,
        cfg.pretrain_steps.saturating_sub(done),
        &cfg.model,
        &sched,
        &train,
        cfg.seed_for("pretrain"),
        resume,
    )
}

/// Fine-tunes until the checkpoint reaches `finetune_steps`; a pretraining
/// checkpoint starts from step 0.
pub fn run_finetune(
    cfg: &RunConfig,
    checkpoint: Checkpoint,
    samples: &[TrainSample],
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let sched = cfg.schedule()?;
    let spec = cfg.layout()?;
    let levels = cfg.buffer_levels(&spec, &sched)?;
    let done = if checkpoint.layout.is_some() { checkpoint.step as usize } else { 0 };
    finetune(
        checkpoint,
        samples,
        &spec,
        &levels,
        &sched,
        cfg.finetune_steps.saturating_sub(done),
        &TrainConfig {
            decay_steps: if cfg.lr_decay { cfg.finetune_steps as u64 } else { cfg.train.decay_steps },
            ..cfg.train.clone()
        },
        cfg.seed_for("finetune"),
        None,
    )
}

/// Samples the `K` target frames for one condition with `variant`.
pub fn sample_one(
    cfg: &RunConfig,
    params: &DenoiserParams,
    sample: &TrainSample,
    variant: Variant,
    rng: &mut Rng,
    keep_snapshots: bool,
) -> Result<(LatentSequence, SampleTrace)> {
    let sched = cfg.schedule()?;
    let grid = cfg.grid_steps(&sched)?;
    let spec = cfg.layout()?;
    let s = &cfg.sampler;
    match variant {
        Variant::NoBuffer => baseline_no_buffer(params, &sample.condition, &spec, sample.label, &grid, &sched, s, rng, keep_snapshots),
        Variant::Replace => baseline_replace(params, &sample.condition, &spec, sample.label, &grid, &sched, s, rng, keep_snapshots),
        _ => {
            let levels = cfg.buffer_levels_for(variant, &spec, &sched)?;
            tic_inference(params, &sample.condition, &spec, &levels, sample.label, &grid, &sched, s, rng, keep_snapshots)
        }
    }
}

/// Samples every condition; sample `i` uses sub-stream `i` of the run's
/// sampling seed, so results do not depend on `threads` and every variant
/// starts from the same noise.
pub fn sample_all(
    cfg: &RunConfig,
    params: &DenoiserParams,
    samples: &[TrainSample],
    variant: Variant,
    threads: usize,
) -> Result<Vec<LatentSequence>> {
    let base = Rng::for_purpose(cfg.seed, "sample");
    let run = |i: usize| -> Result<LatentSequence> {
        let mut rng = base.substream(i as u64);
        sample_one(cfg, params, &samples[i], variant, &mut rng, false).map(|(out, _)| out)
    };
    let threads = threads.max(1).min(samples.len().max(1));
    if threads == 1 {
        return (0..samples.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<LatentSequence>>> = (0..samples.len()).map(|_| None).collect();
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, out) in slots.chunks_mut(chunk).enumerate() {
            let run = &run;
            scope.spawn(move || {
                for (j, slot) in out.iter_mut().enumerate() {
                    *slot = Some(run(c * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

pub fn evaluate(
    cfg: &RunConfig,
    params: &DenoiserParams,
    samples: &[TrainSample],
    variant: Variant,
    threads: usize,
) -> Result<EvalReport> {
    let generated = sample_all(cfg, params, samples, variant, threads)?;
    let truth: Vec<LatentSequence> = samples.iter().map(|s| s.target.clone()).collect();
    EvalReport::score(&generated, &truth)
}

//! Dataset files.
//!
//! ```text
//! "TICD" | u32 version | u32 task id (0xFFFF_FFFF = pretraining clips)
//! | u32 F | u32 H | u32 W | u32 count
//! per sample: u32 label | u32 context frames | u32 n | f64 params[n]
//!             | f32 frames[F * H * W]   (context first, then target)
//! ```
//!
//! All values little-endian. Frames are stored as `f32`; the generators
//! already round through `f32`, so loading reproduces the in-memory data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::denoiser::LabelCondition;
use crate::error::{invalid, Error, Result};
use crate::frame::{Frame, LatentSequence};
use crate::layout::Task;
use crate::rng::Rng;
use crate::tasks::{
    gen_pretrain_clip, make_pair, param_count, regenerate_pair, regenerate_pretrain, Grid,
    CLIP_FRAMES,
};
use crate::training::{PretrainClip, TrainSample};

pub const MAGIC: &[u8; 4] = b"TICD";
pub const VERSION: u32 = 1;
const PRETRAIN_ID: u32 = u32::MAX;
const HEADER_BYTES: usize = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub label: LabelCondition,
    pub context_len: usize,
    pub params: Vec<f64>,
    pub frames: LatentSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `None` for a pretraining corpus.
    pub task: Option<Task>,
    pub grid: Grid,
    pub frames_per_sample: usize,
    pub records: Vec<Record>,
}

/// Frames stored per sample for a task (context plus target).
pub fn frames_per_sample(task: Option<Task>) -> usize {
    match task {
        None => CLIP_FRAMES,
        Some(Task::I2v) => 10,
        Some(Task::StyleTransfer) => 13,
        Some(Task::ActionTransfer) => 14,
        Some(Task::KeyframeInterp) | Some(Task::MultiCond) => 10,
    }
}

/// Exact file size of a dataset with `count` samples.
pub fn file_size(task: Option<Task>, grid: Grid, count: usize) -> usize {
    let per = 12 + 8 * param_count(task) + 4 * frames_per_sample(task) * grid.dim();
    HEADER_BYTES + count * per
}

impl Dataset {
    /// `count` samples; sample `i` draws from its own sub-stream of `seed`,
    /// so any prefix is reproducible on its own.
    pub fn generate(task: Option<Task>, count: usize, grid: Grid, seed: u64) -> Result<Self> {
        let base = Rng::for_purpose(seed, &format!("dataset/{}", task.map_or("pretrain", Task::name)));
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = base.substream(i as u64);
            let record = match task {
                None => {
                    let (clip, params) = gen_pretrain_clip(&mut rng, CLIP_FRAMES, grid)?;
                    Record {
                        label: clip.label,
                        context_len: clip.frames.len(),
                        params,
                        frames: clip.frames,
                    }
                }
                Some(t) => {
                    let (s, params) = make_pair(t, &mut rng, grid)?;
                    Record {
                        label: s.label,
                        context_len: s.condition.len(),
                        params,
                        frames: LatentSequence::concat(&[&s.condition, &s.target])?,
                    }
                }
            };
            records.push(record);
        }
        Ok(Self {
            task,
            grid,
            frames_per_sample: frames_per_sample(task),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_samples(&self) -> Result<Vec<TrainSample>> {
        if self.task.is_none() {
            return Err(invalid!("pretraining corpus has no condition/target pairs"));
        }
        self.records
            .iter()
            .map(|r| {
                Ok(TrainSample {
                    condition: r.frames.slice(0, r.context_len)?,
                    target: r.frames.slice(r.context_len, r.frames.len())?,
                    label: r.label,
                })
            })
            .collect()
    }

    pub fn pretrain_clips(&self) -> Result<Vec<PretrainClip>> {
        if self.task.is_some() {
            return Err(invalid!("task dataset is not a pretraining corpus"));
        }
        Ok(self
            .records
            .iter()
            .map(|r| PretrainClip {
                frames: r.frames.clone(),
                label: r.label,
            })
            .collect())
    }

    /// Whether every record equals its regeneration from stored parameters.
    pub fn verify_regeneration(&self) -> Result<bool> {
        for r in &self.records {
            let again = match self.task {
                None => regenerate_pretrain(&r.params, self.frames_per_sample, self.grid)?.frames,
                Some(t) => {
                    let s = regenerate_pair(t, &r.params, self.grid)?;
                    LatentSequence::concat(&[&s.condition, &s.target])?
                }
            };
            if again != r.frames {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(file_size(self.task, self.grid, self.len()));
        w.extend_from_slice(MAGIC);
        for x in [
            VERSION,
            self.task.map_or(PRETRAIN_ID, Task::id),
            self.frames_per_sample as u32,
            self.grid.height as u32,
            self.grid.width as u32,
            self.records.len() as u32,
        ] {
            w.extend_from_slice(&x.to_le_bytes());
        }
        for r in &self.records {
            w.extend_from_slice(&r.label.0.to_le_bytes());
            w.extend_from_slice(&(r.context_len as u32).to_le_bytes());
            w.extend_from_slice(&(r.params.len() as u32).to_le_bytes());
            for p in &r.params {
                w.extend_from_slice(&p.to_le_bytes());
            }
            for v in r.frames.frames().iter().flat_map(|f| f.as_slice()) {
                w.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let task = match r.u32()? {
            PRETRAIN_ID => None,
            id => Some(Task::from_id(id).map_err(|e| Error::Format(e.to_string()))?),
        };
        let frames = r.u32()? as usize;
        let grid = Grid::new(r.u32()? as usize, r.u32()? as usize)
            .map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()? as usize;
        if frames == 0 {
            return Err(Error::Format("dataset declares zero frames per sample".into()));
        }
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let label = LabelCondition(r.u32()?);
            let context_len = r.u32()? as usize;
            if context_len > frames {
                return Err(Error::Format(format!("context of {context_len} frames exceeds {frames}")));
            }
            let n = r.u32()? as usize;
            let params = r.f64_vec(n)?;
            let mut fs = Vec::with_capacity(frames);
            for _ in 0..frames {
                let data = (0..grid.dim()).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
                fs.push(Frame::new(data));
            }
            records.push(Record {
                label,
                context_len,
                params,
                frames: LatentSequence::new(fs)?,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after dataset", r.remaining())));
        }
        Ok(Self {
            task,
            grid,
            frames_per_sample: frames,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Records the master seed and what was generated from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    /// Task name, or "pretrain".
    pub task: String,
    pub split: String,
    pub count: usize,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

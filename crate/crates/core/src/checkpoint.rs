//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "TICF" | u32 version | u64 config hash | u64 step
//! rng:       u64 seed | u64 stream | u128 word position
//! schedule:  u32 T | u8 kind
//! model:     u32 frame_dim, d_model, n_heads, n_layers, d_ff, n_labels, max_frames
//!            | f64 data_std
//! layout:    u8 present, then u32 L, B, K | u8 buffer mode | u32 task id
//!            | u32 query count | (u32 position, u32 source)*
//! optimizer: f64 lr, beta1, beta2, eps | u64 step
//! u64 n | f64 params[n] | f64 m[n] | f64 v[n]
//! ```
//!
//! The config hash is the first eight bytes of SHA-256 over the model and
//! schedule records and is verified on load.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{invalid, Error, Result};
use crate::layout::{BufferMode, LayoutSpec, QueryFrame, Task};
use crate::optim::OptimizerState;
use crate::rng::RngState;
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const MAGIC: &[u8; 4] = b"TICF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleDescriptor {
    pub steps: usize,
    pub kind: ScheduleKind,
}

impl ScheduleDescriptor {
    pub fn of(sched: &NoiseSchedule) -> Self {
        Self {
            steps: sched.steps(),
            kind: sched.kind(),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub optimizer: OptimizerState,
    pub step: u64,
    /// `None` for a pretraining checkpoint.
    pub layout: Option<LayoutSpec>,
    pub schedule: ScheduleDescriptor,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(
        params: DenoiserParams,
        optimizer: OptimizerState,
        step: u64,
        layout: Option<LayoutSpec>,
        schedule: ScheduleDescriptor,
        rng: RngState,
    ) -> Self {
        Self {
            params,
            optimizer,
            step,
            layout,
            schedule,
            rng,
        }
    }

    pub fn config_hash(&self) -> u64 {
        config_hash(self.params.config(), &self.schedule)
    }

    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        let want = ScheduleDescriptor::of(sched);
        if self.schedule != want {
            return Err(invalid!(
                "checkpoint schedule (T={}, {:?}) does not match run schedule (T={}, {:?})",
                self.schedule.steps,
                self.schedule.kind,
                want.steps,
                want.kind
            ));
        }
        Ok(())
    }

    pub fn check_compatible(&self, model: &DenoiserConfig, sched: &NoiseSchedule) -> Result<()> {
        self.check_schedule(sched)?;
        if self.params.config() != model {
            return Err(invalid!("checkpoint architecture does not match the configured model"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_u64(&mut w, self.config_hash());
        put_u64(&mut w, self.step);
        put_u64(&mut w, self.rng.seed);
        put_u64(&mut w, self.rng.stream);
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&config_record(self.params.config(), &self.schedule));
        match &self.layout {
            None => w.push(0),
            Some(l) => {
                w.push(1);
                put_u32(&mut w, l.condition as u32);
                put_u32(&mut w, l.buffer as u32);
                put_u32(&mut w, l.target as u32);
                w.push(match l.buffer_mode {
                    BufferMode::ReplicateLast => 0,
                    BufferMode::ContinueSource => 1,
                });
                put_u32(&mut w, l.task.id());
                put_u32(&mut w, l.query_frames.len() as u32);
                for q in &l.query_frames {
                    put_u32(&mut w, q.position as u32);
                    put_u32(&mut w, q.source as u32);
                }
            }
        }
        let o = &self.optimizer;
        for x in [o.lr, o.beta1, o.beta2, o.eps] {
            put_f64(&mut w, x);
        }
        put_u64(&mut w, o.step);
        put_u64(&mut w, self.params.count_params() as u64);
        for group in [self.params.tensors(), &o.m[..], &o.v[..]] {
            for x in group.iter().flatten() {
                put_f64(&mut w, *x);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let steps = r.u32()? as usize;
        let kind = ScheduleKind::from_code(r.u8()?)
            .ok_or_else(|| Error::Format("unknown schedule kind".into()))?;
        let schedule = ScheduleDescriptor { steps, kind };
        let config = DenoiserConfig {
            frame_dim: r.u32()? as usize,
            d_model: r.u32()? as usize,
            n_heads: r.u32()? as usize,
            n_layers: r.u32()? as usize,
            d_ff: r.u32()? as usize,
            n_labels: r.u32()? as usize,
            max_frames: r.u32()? as usize,
            data_std: r.f64()?,
        };
        if config_hash(&config, &schedule) != hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        let layout = match r.u8()? {
            0 => None,
            1 => {
                let condition = r.u32()? as usize;
                let buffer = r.u32()? as usize;
                let target = r.u32()? as usize;
                let buffer_mode = match r.u8()? {
                    0 => BufferMode::ReplicateLast,
                    1 => BufferMode::ContinueSource,
                    m => return Err(Error::Format(format!("unknown buffer mode {m}"))),
                };
                let task = Task::from_id(r.u32()?).map_err(|e| Error::Format(e.to_string()))?;
                let nq = r.u32()? as usize;
                let mut queries = Vec::with_capacity(nq.min(1024));
                for _ in 0..nq {
                    queries.push(QueryFrame {
                        position: r.u32()? as usize,
                        source: r.u32()? as usize,
                    });
                }
                let spec = LayoutSpec::new(condition, buffer, target, buffer_mode, queries, task)
                    .map_err(|e| Error::Format(format!("stored layout is invalid: {e}")))?;
                Some(spec)
            }
            f => return Err(Error::Format(format!("bad layout flag {f}"))),
        };
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let opt_step = r.u64()?;
        let n = r.u64()? as usize;
        let expected = crate::denoiser::count_params(&config);
        if n != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {n} parameters, architecture needs {expected}"
            )));
        }
        if r.remaining() != n * 8 * 3 {
            return Err(Error::Format(format!(
                "checkpoint payload is {} bytes, expected {}",
                r.remaining(),
                n * 24
            )));
        }
        let flat = r.f64_vec(n)?;
        let sched = schedule.build().map_err(|e| Error::Format(e.to_string()))?;
        let params = DenoiserParams::from_flat(&config, &flat)
            .map_err(|e| Error::Format(e.to_string()))?
            .with_schedule(&sched);
        let mut optimizer = OptimizerState::adam(&params, lr, beta1, beta2, eps);
        optimizer.step = opt_step;
        for group in [&mut optimizer.m, &mut optimizer.v] {
            for t in group.iter_mut() {
                for x in t.iter_mut() {
                    *x = r.f64()?;
                }
            }
        }
        Ok(Self {
            params,
            optimizer,
            step,
            layout,
            schedule,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn config_record(config: &DenoiserConfig, schedule: &ScheduleDescriptor) -> Vec<u8> {
    let mut w = Vec::new();
    put_u32(&mut w, schedule.steps as u32);
    w.push(schedule.kind.code());
    for x in [
        config.frame_dim,
        config.d_model,
        config.n_heads,
        config.n_layers,
        config.d_ff,
        config.n_labels,
        config.max_frames,
    ] {
        put_u32(&mut w, x as u32);
    }
    put_f64(&mut w, config.data_std);
    w
}

pub fn config_hash(config: &DenoiserConfig, schedule: &ScheduleDescriptor) -> u64 {
    let digest = Sha256::digest(config_record(config, schedule));
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, x: f64) {
    w.extend_from_slice(&x.to_le_bytes());
}

/// Little-endian cursor that reports truncation as a format error.
pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated input: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

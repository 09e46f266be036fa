//! Synthetic moving-blob videos with exact ground truth.
//!
//! A frame is an `H x W` grid holding one Gaussian blob on a zero
//! background. Blobs move with constant velocity and reflect off the grid
//! borders, so every frame is a closed-form function of a handful of
//! parameters. Pixel values are rounded through `f32` at render time so the
//! in-memory data equals what the dataset file stores.

use crate::denoiser::LabelCondition;
use crate::error::{invalid, Result};
use crate::frame::{Frame, LatentSequence};
use crate::layout::Task;
use crate::rng::Rng;
use crate::training::{PretrainClip, TrainSample};

/// Label of plain clips.
pub const LABEL_PLAIN: u32 = 0;
/// Label of intensity-inverted clips.
pub const LABEL_INVERTED: u32 = 1;
/// First of the four direction labels used by the image-to-video task.
pub const LABEL_DIRECTION: u32 = 2;

/// Frames in a pretraining clip (the longest preset layout).
pub const CLIP_FRAMES: usize = 13;

const SPEED_RANGE: (f64, f64) = (0.2, 0.8);
const RADIUS_RANGE: (f64, f64) = (1.0, 1.8);
const INTENSITY_RANGE: (f64, f64) = (0.5, 1.0);
const I2V_SPEED: f64 = 0.6;
const MULTI_VELOCITY: (f64, f64) = (0.5, 0.25);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(invalid!("grid must be at least 2x2, got {height}x{width}"));
        }
        Ok(Self { height, width })
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }
}

impl Default for Grid {
    fn default() -> Self {
        Self { height: 8, width: 8 }
    }
}

/// One blob's generator parameters; position in pixel units at frame 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub radius: f64,
    pub intensity: f64,
}

impl Blob {
    pub fn random(rng: &mut Rng, grid: Grid) -> Self {
        let speed = rng.uniform_range(SPEED_RANGE.0, SPEED_RANGE.1);
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        Self {
            x: rng.uniform_range(0.0, (grid.width - 1) as f64),
            y: rng.uniform_range(0.0, (grid.height - 1) as f64),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            radius: rng.uniform_range(RADIUS_RANGE.0, RADIUS_RANGE.1),
            intensity: rng.uniform_range(INTENSITY_RANGE.0, INTENSITY_RANGE.1),
        }
    }

    pub fn with_velocity(self, vx: f64, vy: f64) -> Self {
        Self { vx, vy, ..self }
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Centre at frame `k`, reflected into `[0, W-1] x [0, H-1]`.
    pub fn position(&self, k: usize, grid: Grid) -> (f64, f64) {
        (
            reflect(self.x + self.vx * k as f64, (grid.width - 1) as f64),
            reflect(self.y + self.vy * k as f64, (grid.height - 1) as f64),
        )
    }

    pub fn render(&self, k: usize, grid: Grid, sign: f64) -> Frame {
        let (cx, cy) = self.position(k, grid);
        let inv = 1.0 / (2.0 * self.radius * self.radius);
        let mut data = Vec::with_capacity(grid.dim());
        for row in 0..grid.height {
            for col in 0..grid.width {
                let d2 = (col as f64 - cx).powi(2) + (row as f64 - cy).powi(2);
                let v = sign * self.intensity * (-d2 * inv).exp();
                data.push(v as f32 as f64);
            }
        }
        Frame::new(data)
    }

    fn to_params(self, out: &mut Vec<f64>) {
        out.extend([self.x, self.y, self.vx, self.vy, self.radius, self.intensity]);
    }

    fn from_params(p: &[f64]) -> Self {
        Self {
            x: p[0],
            y: p[1],
            vx: p[2],
            vy: p[3],
            radius: p[4],
            intensity: p[5],
        }
    }
}

/// Triangle-wave reflection of `p` into `[0, len]`.
fn reflect(p: f64, len: f64) -> f64 {
    let period = 2.0 * len;
    let m = p.rem_euclid(period);
    if m > len {
        period - m
    } else {
        m
    }
}

/// Intensity sign of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Plain,
    Inverted,
}

impl Style {
    pub fn sign(self) -> f64 {
        match self {
            Style::Plain => 1.0,
            Style::Inverted => -1.0,
        }
    }

    pub fn label(self) -> LabelCondition {
        LabelCondition(match self {
            Style::Plain => LABEL_PLAIN,
            Style::Inverted => LABEL_INVERTED,
        })
    }

    fn code(self) -> f64 {
        match self {
            Style::Plain => 0.0,
            Style::Inverted => 1.0,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        match code as u32 {
            0 => Ok(Style::Plain),
            1 => Ok(Style::Inverted),
            c => Err(invalid!("unknown style code {c}")),
        }
    }
}

/// A rendered clip with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVideo {
    pub frames: LatentSequence,
    pub blob: Blob,
    pub style: Style,
}

pub fn render_clip(blob: &Blob, frames: usize, grid: Grid, style: Style) -> LatentSequence {
    (0..frames).map(|k| blob.render(k, grid, style.sign())).collect()
}

/// A plain clip of a blob with random start, velocity, radius and intensity.
pub fn gen_smooth_clip(rng: &mut Rng, frames: usize, grid: Grid) -> Result<ToyVideo> {
    if frames < 2 {
        return Err(invalid!("a clip needs at least 2 frames, got {frames}"));
    }
    let blob = Blob::random(rng, grid);
    Ok(ToyVideo {
        frames: render_clip(&blob, frames, grid, Style::Plain),
        blob,
        style: Style::Plain,
    })
}

/// A pretraining clip, plain or inverted with equal probability.
pub fn gen_pretrain_clip(rng: &mut Rng, frames: usize, grid: Grid) -> Result<(PretrainClip, Vec<f64>)> {
    if frames < 2 {
        return Err(invalid!("a clip needs at least 2 frames, got {frames}"));
    }
    let blob = Blob::random(rng, grid);
    let style = if rng.uniform() < 0.5 { Style::Plain } else { Style::Inverted };
    let mut params = Vec::with_capacity(7);
    blob.to_params(&mut params);
    params.push(style.code());
    let clip = regenerate_pretrain(&params, frames, grid)?;
    Ok((clip, params))
}

pub fn regenerate_pretrain(params: &[f64], frames: usize, grid: Grid) -> Result<PretrainClip> {
    if params.len() != 7 {
        return Err(invalid!("pretraining clip needs 7 parameters, got {}", params.len()));
    }
    let blob = Blob::from_params(params);
    let style = Style::from_code(params[6])?;
    Ok(PretrainClip {
        frames: render_clip(&blob, frames, grid, style),
        label: style.label(),
    })
}

fn direction(d: usize) -> (f64, f64) {
    match d {
        0 => (I2V_SPEED, 0.0),
        1 => (-I2V_SPEED, 0.0),
        2 => (0.0, I2V_SPEED),
        _ => (0.0, -I2V_SPEED),
    }
}

/// A condition/target pair for `task`, with the parameters that regenerate
/// it through [`regenerate_pair`].
pub fn make_pair(task: Task, rng: &mut Rng, grid: Grid) -> Result<(TrainSample, Vec<f64>)> {
    let mut params = Vec::new();
    match task {
        Task::I2v => {
            let d = rng.int_inclusive(0, 3);
            let (vx, vy) = direction(d);
            Blob::random(rng, grid).with_velocity(vx, vy).to_params(&mut params);
            params.push(d as f64);
        }
        Task::StyleTransfer | Task::KeyframeInterp => Blob::random(rng, grid).to_params(&mut params),
        Task::ActionTransfer => {
            let reference = Blob::random(rng, grid);
            let query = Blob::random(rng, grid).with_velocity(reference.vx, reference.vy);
            reference.to_params(&mut params);
            query.to_params(&mut params);
        }
        Task::MultiCond => {
            let (vx, vy) = MULTI_VELOCITY;
            Blob::random(rng, grid).with_velocity(vx, vy).to_params(&mut params);
            params.push(if rng.uniform() < 0.5 { 0.0 } else { 1.0 });
        }
    }
    let sample = regenerate_pair(task, &params, grid)?;
    Ok((sample, params))
}

/// Number of generator parameters stored per sample.
pub fn param_count(task: Option<Task>) -> usize {
    match task {
        None => 7,
        Some(Task::I2v) | Some(Task::MultiCond) => 7,
        Some(Task::StyleTransfer) | Some(Task::KeyframeInterp) => 6,
        Some(Task::ActionTransfer) => 12,
    }
}

/// Rebuilds a pair from its stored parameters.
///
/// - i2v: one still frame; the target is that blob moving in one of four
///   directions chosen by the label.
/// - style-transfer: seven frames of a plain clip (four condition frames and
///   three buffer-source frames); the target is the negated continuation,
///   requested with the inverted-style label.
/// - action-transfer: six reference frames plus one query frame of another
///   blob; the target moves the query blob with the reference velocity,
///   starting with the query frame itself.
/// - keyframe-interp: frames 0, 3, 6, 9 of a clip; the target is frames
///   1, 2, 4, 5, 7, 8.
/// - multi-cond: three copies of a blob image and a flat style image
///   (+0.5 plain, -0.5 inverted); the target is that blob moving with a
///   fixed velocity in the chosen style.
pub fn regenerate_pair(task: Task, params: &[f64], grid: Grid) -> Result<TrainSample> {
    let need = param_count(Some(task));
    if params.len() != need {
        return Err(invalid!("{task} pairs need {need} parameters, got {}", params.len()));
    }
    let blob = Blob::from_params(params);
    let sample = match task {
        Task::I2v => {
            let d = params[6] as u32;
            if d > 3 {
                return Err(invalid!("direction {d} out of range"));
            }
            TrainSample {
                condition: render_clip(&blob, 1, grid, Style::Plain),
                target: render_clip(&blob, 9, grid, Style::Plain),
                label: LabelCondition(LABEL_DIRECTION + d),
            }
        }
        Task::StyleTransfer => {
            let clip = render_clip(&blob, CLIP_FRAMES, grid, Style::Plain);
            TrainSample {
                condition: clip.slice(0, 7)?,
                target: clip.slice(7, 13)?.frames().iter().map(|f| f.map(|v| -v)).collect(),
                label: LabelCondition(LABEL_INVERTED),
            }
        }
        Task::ActionTransfer => {
            let query = Blob::from_params(&params[6..]);
            let mut condition = render_clip(&blob, 6, grid, Style::Plain);
            condition.push(query.render(0, grid, 1.0))?;
            TrainSample {
                condition,
                target: render_clip(&query, 7, grid, Style::Plain),
                label: LabelCondition(LABEL_PLAIN),
            }
        }
        Task::KeyframeInterp => {
            let clip = render_clip(&blob, 10, grid, Style::Plain);
            let pick = |idx: &[usize]| idx.iter().map(|&i| clip[i].clone()).collect::<LatentSequence>();
            TrainSample {
                condition: pick(&[0, 3, 6, 9]),
                target: pick(&[1, 2, 4, 5, 7, 8]),
                label: LabelCondition(LABEL_PLAIN),
            }
        }
        Task::MultiCond => {
            let style = if params[6] == 0.0 { Style::Plain } else { Style::Inverted };
            let still = blob.render(0, grid, 1.0);
            let swatch = Frame::new(vec![0.5 * style.sign(); grid.dim()]);
            TrainSample {
                condition: LatentSequence::new(vec![still.clone(), still.clone(), still, swatch])?,
                target: render_clip(&blob, 6, grid, style),
                label: LabelCondition(LABEL_PLAIN),
            }
        }
    };
    Ok(sample)
}

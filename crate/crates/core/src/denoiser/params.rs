use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub frame_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_labels: usize,
    /// Size of the learned position table; sequences may not be longer.
    pub max_frames: usize,
    /// Assumed per-pixel standard deviation of clean data. When positive the
    /// network is wrapped in per-level input, skip and output scalings and
    /// needs a schedule attached (see [`DenoiserParams::attach_schedule`]);
    /// zero uses the bare network.
    pub data_std: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            frame_dim: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            n_labels: 32,
            max_frames: 16,
            data_std: 0.25,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frame_dim", self.frame_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_labels", self.n_labels),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("denoiser {name} must be positive"));
        }
        if !(self.data_std >= 0.0 && self.data_std.is_finite()) {
            return Err(invalid!("data_std must be finite and non-negative"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(invalid!("d_model must be even, got {}", self.d_model));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.n_heads
            ));
        }
        Ok(())
    }

    /// Conditioning pathways (level MLP, positions, labels, final norm) only
    /// exist when there is at least one block to mix tokens; a zero-layer
    /// model is a bare per-frame linear read-through.
    pub fn has_conditioning(&self) -> bool {
        self.n_layers > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    One,
    /// Normal with std `1/sqrt(fan_in)`.
    Scaled(usize),
}

/// Tensor indices into the flat parameter list.
#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CondSlots {
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub pos: usize,
    pub label: usize,
    pub final_g: usize,
    pub final_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub in_w: usize,
    pub in_b: usize,
    pub cond: Option<CondSlots>,
    pub layers: Vec<LayerSlots>,
    pub out_w: usize,
    pub out_b: usize,
}

struct Builder {
    infos: Vec<TensorInfo>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.infos.push(TensorInfo {
            name,
            shape: shape.to_vec(),
        });
        self.inits.push(init);
        self.infos.len() - 1
    }
}

fn layout(cfg: &DenoiserConfig) -> (Vec<TensorInfo>, Vec<Init>, Slots) {
    use Init::*;
    let (fd, d, f) = (cfg.frame_dim, cfg.d_model, cfg.d_ff);
    let mut b = Builder {
        infos: Vec::new(),
        inits: Vec::new(),
    };
    let in_w = b.add("in.weight".into(), &[d, fd], Scaled(fd));
    let in_b = b.add("in.bias".into(), &[d], Zero);
    let mut cond = None;
    let mut final_norm = None;
    if cfg.has_conditioning() {
        let time_w1 = b.add("time.fc1.weight".into(), &[d, d], Scaled(d));
        let time_b1 = b.add("time.fc1.bias".into(), &[d], Zero);
        let time_w2 = b.add("time.fc2.weight".into(), &[d, d], Scaled(d));
        let time_b2 = b.add("time.fc2.bias".into(), &[d], Zero);
        let pos = b.add("pos_embed".into(), &[cfg.max_frames, d], Scaled(1));
        let label = b.add("label_embed".into(), &[cfg.n_labels, d], Scaled(1));
        cond = Some((time_w1, time_b1, time_w2, time_b2, pos, label));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        layers.push(LayerSlots {
            ln1_g: b.add(p("ln1.gain"), &[d], One),
            ln1_b: b.add(p("ln1.bias"), &[d], Zero),
            q_w: b.add(p("attn.q.weight"), &[d, d], Scaled(d)),
            q_b: b.add(p("attn.q.bias"), &[d], Zero),
            k_w: b.add(p("attn.k.weight"), &[d, d], Scaled(d)),
            k_b: b.add(p("attn.k.bias"), &[d], Zero),
            v_w: b.add(p("attn.v.weight"), &[d, d], Scaled(d)),
            v_b: b.add(p("attn.v.bias"), &[d], Zero),
            o_w: b.add(p("attn.out.weight"), &[d, d], Scaled(d)),
            o_b: b.add(p("attn.out.bias"), &[d], Zero),
            ln2_g: b.add(p("ln2.gain"), &[d], One),
            ln2_b: b.add(p("ln2.bias"), &[d], Zero),
            ff1_w: b.add(p("ff.fc1.weight"), &[f, d], Scaled(d)),
            ff1_b: b.add(p("ff.fc1.bias"), &[f], Zero),
            ff2_w: b.add(p("ff.fc2.weight"), &[d, f], Scaled(f)),
            ff2_b: b.add(p("ff.fc2.bias"), &[d], Zero),
        });
    }
    if cfg.has_conditioning() {
        final_norm = Some((
            b.add("final_norm.gain".into(), &[d], One),
            b.add("final_norm.bias".into(), &[d], Zero),
        ));
    }
    let out_w = b.add("out.weight".into(), &[fd, d], Zero);
    let out_b = b.add("out.bias".into(), &[fd], Zero);
    let cond = cond.zip(final_norm).map(
        |((time_w1, time_b1, time_w2, time_b2, pos, label), (final_g, final_b))| CondSlots {
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            pos,
            label,
            final_g,
            final_b,
        },
    );
    let slots = Slots {
        in_w,
        in_b,
        cond,
        layers,
        out_w,
        out_b,
    };
    (b.infos, b.inits, slots)
}

/// All weights of the denoiser, one flat vector per tensor in declaration
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub(crate) config: DenoiserConfig,
    pub(crate) infos: Vec<TensorInfo>,
    pub(crate) tensors: Vec<Vec<f64>>,
    pub(crate) precond: Option<Preconditioner>,
}

/// Per-level scalings `eps = c_skip * z + c_out * net(c_in * z)`.
///
/// For zero-mean data of variance `s^2`, `z = a x + g e` has variance
/// `v = a^2 s^2 + g^2`; `c_skip = g / v` is the best linear noise estimate
/// and `c_out = a s / sqrt(v)` the standard deviation of what remains, so the
/// network always regresses a unit-scale residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub(crate) c_in: Vec<f64>,
    pub(crate) c_skip: Vec<f64>,
    pub(crate) c_out: Vec<f64>,
}

impl Preconditioner {
    pub fn new(data_std: f64, sched: &NoiseSchedule) -> Self {
        let s2 = data_std * data_std;
        let mut c_in = Vec::with_capacity(sched.steps() + 1);
        let mut c_skip = Vec::with_capacity(sched.steps() + 1);
        let mut c_out = Vec::with_capacity(sched.steps() + 1);
        for (&a, &g) in sched.alphas().iter().zip(sched.sigmas()) {
            let v = a * a * s2 + g * g;
            c_in.push(1.0 / v.sqrt());
            c_skip.push(g / v);
            c_out.push(a * data_std / v.sqrt());
        }
        Self { c_in, c_skip, c_out }
    }

    pub fn horizon(&self) -> usize {
        self.c_in.len() - 1
    }
}

impl DenoiserParams {
    /// Scaled-normal weights, unit norm gains, zero biases, and a zero output
    /// projection, so a fresh model predicts exactly zero noise.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (infos, inits, _) = layout(config);
        let mut rng = Rng::for_purpose(seed, "denoiser-init");
        let tensors = infos
            .iter()
            .zip(&inits)
            .map(|(info, init)| match *init {
                Init::Zero => vec![0.0; info.numel()],
                Init::One => vec![1.0; info.numel()],
                Init::Scaled(fan_in) => {
                    let std = 1.0 / (fan_in as f64).sqrt();
                    (0..info.numel()).map(|_| std * rng.normal()).collect()
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            infos,
            tensors,
            precond: None,
        })
    }

    /// Rebuilds parameters from raw values laid out as [`Self::flat`] emits.
    pub fn from_flat(config: &DenoiserConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let (infos, _, _) = layout(config);
        let total: usize = infos.iter().map(TensorInfo::numel).sum();
        if flat.len() != total {
            return Err(invalid!(
                "expected {total} parameter values, got {}",
                flat.len()
            ));
        }
        let mut off = 0;
        let tensors = infos
            .iter()
            .map(|info| {
                let t = flat[off..off + info.numel()].to_vec();
                off += info.numel();
                t
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            infos,
            tensors,
            precond: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Builds the level scalings for `sched`; a no-op when `data_std` is 0.
    pub fn attach_schedule(&mut self, sched: &NoiseSchedule) {
        self.precond = (self.config.data_std > 0.0)
            .then(|| Preconditioner::new(self.config.data_std, sched));
    }

    pub fn with_schedule(mut self, sched: &NoiseSchedule) -> Self {
        self.attach_schedule(sched);
        self
    }

    pub fn preconditioner(&self) -> Option<&Preconditioner> {
        self.precond.as_ref()
    }

    pub fn tensor_infos(&self) -> &[TensorInfo] {
        &self.infos
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn count_params(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn slots(&self) -> Slots {
        layout(&self.config).2
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Parameter count implied by a config, without allocating weights.
pub fn count_params(config: &DenoiserConfig) -> usize {
    layout(config).0.iter().map(TensorInfo::numel).sum()
}

/// Gradients, shaped like [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

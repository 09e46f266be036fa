use super::kernels::*;
use super::params::{DenoiserParams, Gradients, LayerSlots};
use super::LabelCondition;
use crate::error::{shape_err, Error, Result};
use crate::frame::{Frame, LatentSequence};
use crate::layout::NoiseLevelVector;

struct LayerCache {
    h_in: Vec<f64>,
    ln1: NormCache,
    u1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln2: NormCache,
    u2: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

struct CondCache {
    sinus: Vec<f64>,
    time_pre: Vec<f64>,
    time_act: Vec<f64>,
    final_norm: NormCache,
}

/// Activations kept from a forward pass for the matching backward pass.
pub struct ForwardCache {
    frames: usize,
    /// Token count: frames plus the label token when conditioning is on.
    tokens: usize,
    label: usize,
    /// Per-frame output scaling, when preconditioned.
    out_scale: Option<Vec<f64>>,
    /// Network input after any input scaling.
    x: Vec<f64>,
    cond: Option<CondCache>,
    layers: Vec<LayerCache>,
    /// Input to the output projection, frame tokens only.
    head_in: Vec<f64>,
    output: LatentSequence,
    /// Token embeddings before the first block, frame tokens only.
    embeddings: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &LatentSequence {
        &self.output
    }

    /// Per-frame token embeddings entering the first block.
    pub fn frame_embeddings(&self) -> Vec<Frame> {
        let d = self.embeddings.len() / self.frames;
        self.embeddings
            .chunks_exact(d)
            .map(|c| Frame::new(c.to_vec()))
            .collect()
    }
}

impl DenoiserParams {
    fn check_inputs(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
    ) -> Result<()> {
        let cfg = &self.config;
        if seq.is_empty() {
            return Err(shape_err!("empty input sequence"));
        }
        if seq.len() != levels.len() {
            return Err(shape_err!(
                "{} frames but {} noise levels",
                seq.len(),
                levels.len()
            ));
        }
        if seq.dim() != Some(cfg.frame_dim) {
            return Err(shape_err!(
                "frame dimension {:?} but model expects {}",
                seq.dim(),
                cfg.frame_dim
            ));
        }
        if cfg.has_conditioning() {
            if seq.len() > cfg.max_frames {
                return Err(shape_err!(
                    "{} frames exceed the position table of {}",
                    seq.len(),
                    cfg.max_frames
                ));
            }
            label.check(cfg.n_labels)?;
        }
        if cfg.data_std > 0.0 {
            let pc = self.precond.as_ref().ok_or_else(|| {
                Error::InvalidArgument("model uses data_std scaling but has no schedule attached".into())
            })?;
            if levels.max() > pc.horizon() {
                return Err(Error::InvalidArgument(format!(
                    "noise level {} beyond the attached schedule of {} steps",
                    levels.max(),
                    pc.horizon()
                )));
            }
        }
        Ok(())
    }

    /// Predicted noise, one frame per input frame.
    pub fn forward(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
    ) -> Result<LatentSequence> {
        Ok(self.forward_cached(seq, levels, label)?.output)
    }

    pub fn forward_cached(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
    ) -> Result<ForwardCache> {
        self.check_inputs(seq, levels, label)?;
        let cfg = &self.config;
        let s = self.slots();
        let p = &self.tensors;
        let (fd, d) = (cfg.frame_dim, cfg.d_model);
        let f = seq.len();
        let mut x = seq.flatten();
        if let Some(pc) = &self.precond {
            for (i, chunk) in x.chunks_exact_mut(fd).enumerate() {
                let c = pc.c_in[levels[i]];
                chunk.iter_mut().for_each(|v| *v *= c);
            }
        }

        let frame_tok = linear(&x, &p[s.in_w], &p[s.in_b], fd, d);
        let (mut h, cond_parts, tokens) = match &s.cond {
            None => (frame_tok, None, f),
            Some(c) => {
                let sinus: Vec<f64> = levels
                    .as_slice()
                    .iter()
                    .flat_map(|&t| sinusoidal(t, d))
                    .collect();
                let time_pre = linear(&sinus, &p[c.time_w1], &p[c.time_b1], d, d);
                let time_act = silu(&time_pre);
                let temb = linear(&time_act, &p[c.time_w2], &p[c.time_b2], d, d);
                let mut h = Vec::with_capacity((f + 1) * d);
                let lab = label.0 as usize;
                h.extend_from_slice(&p[c.label][lab * d..(lab + 1) * d]);
                for i in 0..f {
                    for j in 0..d {
                        h.push(frame_tok[i * d + j] + temb[i * d + j] + p[c.pos][i * d + j]);
                    }
                }
                (h, Some((sinus, time_pre, time_act)), f + 1)
            }
        };
        let first_frame = tokens - f;
        let embeddings = h[first_frame * d..].to_vec();

        let mut layers = Vec::with_capacity(s.layers.len());
        for ls in &s.layers {
            let (cache, out) = self.block_forward(ls, h, tokens);
            layers.push(cache);
            h = out;
        }

        let (head_in, cond) = match (&s.cond, cond_parts) {
            (Some(c), Some((sinus, time_pre, time_act))) => {
                let (normed, final_norm) = layer_norm(&h, &p[c.final_g], &p[c.final_b], d);
                (
                    normed[first_frame * d..].to_vec(),
                    Some(CondCache {
                        sinus,
                        time_pre,
                        time_act,
                        final_norm,
                    }),
                )
            }
            _ => (h, None),
        };
        let mut y = linear(&head_in, &p[s.out_w], &p[s.out_b], d, fd);
        if let Some(pc) = &self.precond {
            for (i, (chunk, z)) in y.chunks_exact_mut(fd).zip(seq.frames()).enumerate() {
                let (co, cs) = (pc.c_out[levels[i]], pc.c_skip[levels[i]]);
                for (v, zv) in chunk.iter_mut().zip(z.as_slice()) {
                    *v = cs * zv + co * *v;
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite denoiser output".into()));
        }
        let output = LatentSequence::new(
            y.chunks_exact(fd).map(|c| Frame::new(c.to_vec())).collect(),
        )?;
        Ok(ForwardCache {
            frames: f,
            tokens,
            label: label.0 as usize,
            out_scale: self.precond.as_ref().map(|pc| levels.as_slice().iter().map(|&t| pc.c_out[t]).collect()),
            x,
            cond,
            layers,
            head_in,
            output,
            embeddings,
        })
    }

    fn block_forward(&self, ls: &LayerSlots, h_in: Vec<f64>, n: usize) -> (LayerCache, Vec<f64>) {
        let p = &self.tensors;
        let cfg = &self.config;
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let (u1, ln1) = layer_norm(&h_in, &p[ls.ln1_g], &p[ls.ln1_b], d);
        let q = linear(&u1, &p[ls.q_w], &p[ls.q_b], d, d);
        let k = linear(&u1, &p[ls.k_w], &p[ls.k_b], d, d);
        let v = linear(&u1, &p[ls.v_w], &p[ls.v_b], d, d);
        let (ctx, probs) = attention(&q, &k, &v, n, d, cfg.n_heads);
        let o = linear(&ctx, &p[ls.o_w], &p[ls.o_b], d, d);
        let h_mid: Vec<f64> = h_in.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (u2, ln2) = layer_norm(&h_mid, &p[ls.ln2_g], &p[ls.ln2_b], d);
        let ff_pre = linear(&u2, &p[ls.ff1_w], &p[ls.ff1_b], d, ff);
        let ff_act = silu(&ff_pre);
        let ff_out = linear(&ff_act, &p[ls.ff2_w], &p[ls.ff2_b], ff, d);
        let h_out = h_mid.iter().zip(&ff_out).map(|(a, b)| a + b).collect();
        (
            LayerCache {
                h_in,
                ln1,
                u1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                u2,
                ff_pre,
                ff_act,
            },
            h_out,
        )
    }

    /// Gradient of `<forward(seq), upstream>` with respect to every parameter.
    pub fn backward(
        &self,
        seq: &LatentSequence,
        levels: &NoiseLevelVector,
        label: LabelCondition,
        upstream: &LatentSequence,
    ) -> Result<Gradients> {
        let cache = self.forward_cached(seq, levels, label)?;
        let mut grads = self.zero_gradients();
        self.backward_from_cache(&cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates into `grads`.
    pub fn backward_from_cache(
        &self,
        cache: &ForwardCache,
        upstream: &LatentSequence,
        grads: &mut Gradients,
    ) -> Result<()> {
        let cfg = &self.config;
        if upstream.len() != cache.frames || upstream.dim() != Some(cfg.frame_dim) {
            return Err(shape_err!(
                "upstream has {} frames of dim {:?}, forward produced {} of dim {}",
                upstream.len(),
                upstream.dim(),
                cache.frames,
                cfg.frame_dim
            ));
        }
        let s = self.slots();
        let p = &self.tensors;
        let g = &mut grads.tensors;
        let (fd, d, ff) = (cfg.frame_dim, cfg.d_model, cfg.d_ff);
        let n = cache.tokens;
        let first_frame = n - cache.frames;
        let mut dy = upstream.flatten();
        if let Some(scale) = &cache.out_scale {
            for (chunk, c) in dy.chunks_exact_mut(fd).zip(scale) {
                chunk.iter_mut().for_each(|v| *v *= c);
            }
        }

        linear_back_weight(&cache.head_in, &dy, d, fd, &mut g[s.out_w]);
        linear_back_bias(&dy, fd, &mut g[s.out_b]);
        let mut d_head = vec![0.0; cache.frames * d];
        linear_back_input(&dy, &p[s.out_w], d, fd, &mut d_head);

        let mut dh = match (&s.cond, &cache.cond) {
            (Some(c), Some(cc)) => {
                let mut dnormed = vec![0.0; n * d];
                dnormed[first_frame * d..].copy_from_slice(&d_head);
                let (gg, gb) = pair_mut(g, c.final_g, c.final_b);
                layer_norm_back(&dnormed, &cc.final_norm, &p[c.final_g], d, gg, gb)
            }
            _ => d_head,
        };

        for (ls, lc) in s.layers.iter().zip(&cache.layers).rev() {
            // h_out = h_mid + ff(ln2(h_mid))
            let dff_act = {
                linear_back_weight(&lc.ff_act, &dh, ff, d, &mut g[ls.ff2_w]);
                linear_back_bias(&dh, d, &mut g[ls.ff2_b]);
                let mut t = vec![0.0; n * ff];
                linear_back_input(&dh, &p[ls.ff2_w], ff, d, &mut t);
                t
            };
            let dff_pre = silu_back(&lc.ff_pre, &dff_act);
            linear_back_weight(&lc.u2, &dff_pre, d, ff, &mut g[ls.ff1_w]);
            linear_back_bias(&dff_pre, ff, &mut g[ls.ff1_b]);
            let mut du2 = vec![0.0; n * d];
            linear_back_input(&dff_pre, &p[ls.ff1_w], d, ff, &mut du2);
            let dh_mid = {
                let (gg, gb) = pair_mut(g, ls.ln2_g, ls.ln2_b);
                let dx = layer_norm_back(&du2, &lc.ln2, &p[ls.ln2_g], d, gg, gb);
                dh.iter().zip(&dx).map(|(a, b)| a + b).collect::<Vec<_>>()
            };

            // h_mid = h_in + out(attn(q, k, v))
            linear_back_weight(&lc.ctx, &dh_mid, d, d, &mut g[ls.o_w]);
            linear_back_bias(&dh_mid, d, &mut g[ls.o_b]);
            let mut dctx = vec![0.0; n * d];
            linear_back_input(&dh_mid, &p[ls.o_w], d, d, &mut dctx);
            let (dq, dk, dv) =
                attention_back(&dctx, &lc.q, &lc.k, &lc.v, &lc.probs, n, d, cfg.n_heads);
            let mut du1 = vec![0.0; n * d];
            for (dproj, w, b) in [(&dq, ls.q_w, ls.q_b), (&dk, ls.k_w, ls.k_b), (&dv, ls.v_w, ls.v_b)] {
                linear_back_weight(&lc.u1, dproj, d, d, &mut g[w]);
                linear_back_bias(dproj, d, &mut g[b]);
                linear_back_input(dproj, &p[w], d, d, &mut du1);
            }
            let (gg, gb) = pair_mut(g, ls.ln1_g, ls.ln1_b);
            let dx = layer_norm_back(&du1, &lc.ln1, &p[ls.ln1_g], d, gg, gb);
            dh = dh_mid.iter().zip(&dx).map(|(a, b)| a + b).collect();
            debug_assert_eq!(lc.h_in.len(), dh.len());
        }

        let d_frames = &dh[first_frame * d..];
        if let (Some(c), Some(cc)) = (&s.cond, &cache.cond) {
            for (gv, dv) in g[c.label][cache.label * d..(cache.label + 1) * d]
                .iter_mut()
                .zip(&dh[..d])
            {
                *gv += dv;
            }
            for (gv, dv) in g[c.pos][..cache.frames * d].iter_mut().zip(d_frames) {
                *gv += dv;
            }
            linear_back_weight(&cc.time_act, d_frames, d, d, &mut g[c.time_w2]);
            linear_back_bias(d_frames, d, &mut g[c.time_b2]);
            let mut dact = vec![0.0; cache.frames * d];
            linear_back_input(d_frames, &p[c.time_w2], d, d, &mut dact);
            let dpre = silu_back(&cc.time_pre, &dact);
            linear_back_weight(&cc.sinus, &dpre, d, d, &mut g[c.time_w1]);
            linear_back_bias(&dpre, d, &mut g[c.time_b1]);
        }
        linear_back_weight(&cache.x, d_frames, fd, d, &mut g[s.in_w]);
        linear_back_bias(d_frames, d, &mut g[s.in_b]);
        Ok(())
    }
}

/// Two distinct tensors borrowed mutably at once.
fn pair_mut(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b, "tensor slots are declared in order");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

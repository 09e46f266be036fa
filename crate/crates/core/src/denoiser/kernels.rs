//! Dense kernels over row-major `[rows x cols]` buffers, with their
//! reverse-mode counterparts. Backward kernels accumulate into their outputs.

pub(crate) const LN_EPS: f64 = 1e-5;

/// `y[n x dout] = x[n x din] * w^T + b`, with `w` stored `[dout x din]`.
/// Rows are processed four at a time so each weight row is loaded once per
/// block.
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let n = x.len() / din;
    let mut y = vec![0.0; n * dout];
    let mut r = 0;
    while r + 4 <= n {
        let xs: [&[f64]; 4] = std::array::from_fn(|i| &x[(r + i) * din..(r + i + 1) * din]);
        for o in 0..dout {
            let wr = &w[o * din..(o + 1) * din];
            let mut acc = [[0.0f64; 2]; 4];
            let mut j = 0;
            while j + 2 <= din {
                for l in 0..2 {
                    let wv = wr[j + l];
                    for i in 0..4 {
                        acc[i][l] += xs[i][j + l] * wv;
                    }
                }
                j += 2;
            }
            for i in 0..4 {
                let mut sum = acc[i][0] + acc[i][1];
                if j < din {
                    sum += xs[i][j] * wr[j];
                }
                y[(r + i) * dout + o] = b[o] + sum;
            }
        }
        r += 4;
    }
    for r in r..n {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            y[r * dout + o] = b[o] + dot(xr, &w[o * din..(o + 1) * din]);
        }
    }
    y
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// `dw += dy^T x`, four input rows per pass over `dw`.
pub(crate) fn linear_back_weight(x: &[f64], dy: &[f64], din: usize, dout: usize, dw: &mut [f64]) {
    let n = x.len() / din;
    let mut r = 0;
    while r + 4 <= n {
        let xs: [&[f64]; 4] = std::array::from_fn(|i| &x[(r + i) * din..(r + i + 1) * din]);
        for o in 0..dout {
            let g: [f64; 4] = std::array::from_fn(|i| dy[(r + i) * dout + o]);
            for (j, d) in dw[o * din..(o + 1) * din].iter_mut().enumerate() {
                *d += g[0] * xs[0][j] + g[1] * xs[1][j] + g[2] * xs[2][j] + g[3] * xs[3][j];
            }
        }
        r += 4;
    }
    for r in r..n {
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dy[r * dout + o];
            for (d, xv) in dw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
}

/// `db += column sums of dy`.
pub(crate) fn linear_back_bias(dy: &[f64], dout: usize, db: &mut [f64]) {
    for row in dy.chunks_exact(dout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

/// `dx += dy * w`, four weight rows per pass over each `dx` row.
pub(crate) fn linear_back_input(dy: &[f64], w: &[f64], din: usize, dout: usize, dx: &mut [f64]) {
    let n = dy.len() / dout;
    for r in 0..n {
        let dxr = &mut dx[r * din..(r + 1) * din];
        let gr = &dy[r * dout..(r + 1) * dout];
        let mut o = 0;
        while o + 4 <= dout {
            let g = &gr[o..o + 4];
            let ws: [&[f64]; 4] = std::array::from_fn(|i| &w[(o + i) * din..(o + i + 1) * din]);
            for (j, d) in dxr.iter_mut().enumerate() {
                *d += g[0] * ws[0][j] + g[1] * ws[1][j] + g[2] * ws[2][j] + g[3] * ws[3][j];
            }
            o += 4;
        }
        for o in o..dout {
            let g = gr[o];
            for (d, wv) in dxr.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                *d += g * wv;
            }
        }
    }
}

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], dim: usize) -> (Vec<f64>, NormCache) {
    let n = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..dim {
            let h = (xr[c] - mean) * rs;
            xhat[r * dim + c] = h;
            y[r * dim + c] = gain[c] * h + bias[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Accumulates gain/bias gradients and returns `dx`.
pub(crate) fn layer_norm_back(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    dim: usize,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..n {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        for c in 0..dim {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / dim as f64;
        let m2 = dot(&dxhat, xh) / dim as f64;
        let rs = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `da = ds * silu'(a)`.
pub(crate) fn silu_back(a: &[f64], ds: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(ds)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Full (unmasked) multi-head attention. Returns the per-head context and
/// the softmax probabilities `[heads x n x n]`.
pub(crate) fn attention(q: &[f64], k: &[f64], v: &[f64], n: usize, dim: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = vec![0.0; n * dim];
    let mut probs = vec![0.0; heads * n * n];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let qi = &q[i * dim + off..i * dim + off + hd];
            let row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, p) in row.iter_mut().enumerate() {
                let s = dot(qi, &k[j * dim + off..j * dim + off + hd]) * scale;
                *p = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
            let ci = &mut ctx[i * dim + off..i * dim + off + hd];
            for (j, &p) in row.iter().enumerate() {
                for (c, vv) in ci.iter_mut().zip(&v[j * dim + off..j * dim + off + hd]) {
                    *c += p * vv;
                }
            }
        }
    }
    (ctx, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_back(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = vec![0.0; n * dim];
    let mut dk = vec![0.0; n * dim];
    let mut dv = vec![0.0; n * dim];
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..n {
            let row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let dci = &dctx[i * dim + off..i * dim + off + hd];
            for j in 0..n {
                let vj = &v[j * dim + off..j * dim + off + hd];
                dp[j] = dot(dci, vj);
                for (d, g) in dv[j * dim + off..j * dim + off + hd].iter_mut().zip(dci) {
                    *d += row[j] * g;
                }
            }
            let inner = dot(row, &dp);
            let qi = &q[i * dim + off..i * dim + off + hd];
            for j in 0..n {
                let ds = row[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k[j * dim + off..j * dim + off + hd];
                for (d, kv) in dq[i * dim + off..i * dim + off + hd].iter_mut().zip(kj) {
                    *d += ds * kv;
                }
                for (d, qv) in dk[j * dim + off..j * dim + off + hd].iter_mut().zip(qi) {
                    *d += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Standard transformer sinusoidal embedding of an integer level.
pub(crate) fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

//! Row-major building blocks with explicit backward passes.
//!
//! Every `*_backward` accumulates (`+=`) into the parameter gradients and
//! writes or accumulates the input gradient as documented.

pub const LN_EPS: f64 = 1e-5;

/// `y[r, o] = b[o] + Σ_i x[r, i] w[o, i]` for `rows` rows.
pub fn linear(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * inp);
    debug_assert_eq!(w.len(), out * inp);
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            yr[o] = b[o] + xr.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

/// Accumulates `dw`, `db`; returns `dx` when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    rows: usize,
    inp: usize,
    out: usize,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let mut dx = want_dx.then(|| vec![0.0; rows * inp]);
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let dyr = &dy[r * out..(r + 1) * out];
        for o in 0..out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let dwo = &mut dw[o * inp..(o + 1) * inp];
            for (d, &xv) in dwo.iter_mut().zip(xr) {
                *d += g * xv;
            }
            if let Some(dx) = dx.as_mut() {
                let wo = &w[o * inp..(o + 1) * inp];
                for (d, &wv) in dx[r * inp..(r + 1) * inp].iter_mut().zip(wo) {
                    *d += g * wv;
                }
            }
        }
    }
    dx
}

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, dim: usize) -> (Vec<f64>, LayerNormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for d in 0..dim {
            let h = (xr[d] - mean) * rs;
            xhat[r * dim + d] = h;
            y[r * dim + d] = gamma[d] * h + beta[d];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    rows: usize,
    dim: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for d in 0..dim {
            dgamma[d] += dyr[d] * xh[d];
            dbeta[d] += dyr[d];
            let dxh = dyr[d] * gamma[d];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[d];
        }
        mean_dxhat /= dim as f64;
        mean_dxhat_xhat /= dim as f64;
        for d in 0..dim {
            let dxh = dyr[d] * gamma[d];
            dx[r * dim + d] = cache.rstd[r] * (dxh - mean_dxhat - xh[d] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// In-place numerically stable softmax.
pub fn softmax(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Given `p = softmax(s)` and `dp`, returns `ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(a, b)| a * (b - dot)).collect()
}

pub struct AttentionCache {
    pub qkv: Vec<f64>,
    /// `[heads, n, n]`
    pub att: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    pub ctx: Vec<f64>,
}

/// Multi-head self-attention over `n` tokens of width `dim`.
#[allow(clippy::too_many_arguments)]
pub fn self_attention(
    x: &[f64],
    w_qkv: &[f64],
    b_qkv: &[f64],
    w_out: &[f64],
    b_out: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
) -> (Vec<f64>, AttentionCache) {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(x, w_qkv, b_qkv, n, dim, 3 * dim);
    let mut att = vec![0.0; heads * n * n];
    let mut ctx = vec![0.0; n * dim];
    for h in 0..heads {
        for i in 0..n {
            let q = &qkv[i * 3 * dim + h * dh..i * 3 * dim + (h + 1) * dh];
            let row = &mut att[(h * n + i) * n..(h * n + i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let k = &qkv[j * 3 * dim + dim + h * dh..j * 3 * dim + dim + (h + 1) * dh];
                *r = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax(row);
            for j in 0..n {
                let a = row[j];
                let v = &qkv[j * 3 * dim + 2 * dim + h * dh..j * 3 * dim + 2 * dim + (h + 1) * dh];
                for d in 0..dh {
                    ctx[i * dim + h * dh + d] += a * v[d];
                }
            }
        }
    }
    let y = linear(&ctx, w_out, b_out, n, dim, dim);
    (y, AttentionCache { qkv, att, ctx })
}

pub struct AttentionGrads<'a> {
    pub w_qkv: &'a mut [f64],
    pub b_qkv: &'a mut [f64],
    pub w_out: &'a mut [f64],
    pub b_out: &'a mut [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention_backward(
    dy: &[f64],
    x: &[f64],
    cache: &AttentionCache,
    w_qkv: &[f64],
    w_out: &[f64],
    grads: AttentionGrads<'_>,
    n: usize,
    dim: usize,
    heads: usize,
) -> Vec<f64> {
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dctx = linear_backward(dy, &cache.ctx, w_out, grads.w_out, grads.b_out, n, dim, dim, true)
        .expect("dx requested");
    let qkv = &cache.qkv;
    let mut dqkv = vec![0.0; n * 3 * dim];
    for h in 0..heads {
        for i in 0..n {
            let att = &cache.att[(h * n + i) * n..(h * n + i + 1) * n];
            let dc = &dctx[i * dim + h * dh..i * dim + (h + 1) * dh];
            let mut datt = vec![0.0; n];
            for j in 0..n {
                let voff = j * 3 * dim + 2 * dim + h * dh;
                let mut s = 0.0;
                for d in 0..dh {
                    s += dc[d] * qkv[voff + d];
                    dqkv[voff + d] += att[j] * dc[d];
                }
                datt[j] = s;
            }
            let ds = softmax_backward(att, &datt);
            let qoff = i * 3 * dim + h * dh;
            for j in 0..n {
                let g = ds[j] * scale;
                if g == 0.0 {
                    continue;
                }
                let koff = j * 3 * dim + dim + h * dh;
                for d in 0..dh {
                    dqkv[qoff + d] += g * qkv[koff + d];
                    dqkv[koff + d] += g * qkv[qoff + d];
                }
            }
        }
    }
    linear_backward(&dqkv, x, w_qkv, grads.w_qkv, grads.b_qkv, n, dim, 3 * dim, true).expect("dx requested")
}

//! The HSTU block and its hand-derived backward passes.
//!
//! One layer maps an `L × d` sequence `x` to the same shape:
//!
//! ```text
//! n     = LayerNorm(x)                      (learned scale/bias, eps 1e-6)
//! s     = n·W1 + b1                         (L × 4d fused projection)
//! u,v,q,k = split(silu(s))                  (column blocks, in that order)
//! a     = MultiHeadAttention(q, k, v)       (masked, silu-scored)
//! y     = LayerNorm(a) ⊙ u                  (learned gate norm)
//! out   = y·W2 + b2 + x                     (residual)
//! ```
//!
//! Two cache policies feed the backward pass. The full cache keeps every
//! large intermediate the gradients touch: `x`, the input-norm statistics,
//! `n`, the pre-activation `s`, `a`, and `y`, eight `L×d`-sized tensors.
//! The minimal cache keeps only `x`, the norm statistics, `u`, and `a`
//! (three), and the backward pass rematerializes the rest: `n` is rebuilt
//! from `x` and the saved statistics, the fused projection GEMM is re-run to
//! recover `s` (and with it u, v, q, k), and `y` is recomputed inside the
//! gated norm. Both paths share the exact same arithmetic, in the same
//! order, so their gradients agree bitwise.
//!
//! Attention scores are never cached in either variant; the attention
//! backward recomputes them pair by pair.

use crate::attention::{attention_backward, attention_forward, silu, silu_grad, MaskSpec};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::numerics::{fp8_gemm_emulated, fp8_quantize_rowwise, GemmBias};
use rand::Rng;

pub const LN_EPS: f64 = 1e-6;

// ----- layer norm -----

/// Per-row layer norm with learned scale and bias. Returns the output plus
/// the per-row mean and inverse standard deviation needed by the backward
/// pass (and by rematerialization).
pub fn ln_forward(x: &Mat, scale: &[f64], bias: &[f64]) -> (Mat, Vec<f64>, Vec<f64>) {
    let (rows, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; rows];
    let mut inv_std = vec![0.0; rows];
    let mut out = Mat::zeros(rows, d);
    for i in 0..rows {
        let row = x.row(i);
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        mean[i] = m;
        inv_std[i] = is;
        ln_apply_row(row, m, is, scale, bias, out.row_mut(i));
    }
    (out, mean, inv_std)
}

/// Rebuilds the normalized output from saved statistics. Shares the row
/// kernel with [`ln_forward`], so rebuilt values are bitwise identical.
pub fn ln_rebuild(x: &Mat, mean: &[f64], inv_std: &[f64], scale: &[f64], bias: &[f64]) -> Mat {
    let (rows, d) = (x.rows(), x.cols());
    let mut out = Mat::zeros(rows, d);
    for i in 0..rows {
        ln_apply_row(x.row(i), mean[i], inv_std[i], scale, bias, out.row_mut(i));
    }
    out
}

#[inline]
fn ln_apply_row(row: &[f64], mean: f64, inv_std: f64, scale: &[f64], bias: &[f64], out: &mut [f64]) {
    for j in 0..row.len() {
        out[j] = scale[j] * ((row[j] - mean) * inv_std) + bias[j];
    }
}

/// Layer-norm backward. Returns `(dx, dscale, dbias)`.
pub fn ln_backward(
    d_out: &Mat,
    x: &Mat,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
) -> (Mat, Vec<f64>, Vec<f64>) {
    let (rows, d) = (x.rows(), x.cols());
    let mut dx = Mat::zeros(rows, d);
    let mut dscale = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for i in 0..rows {
        let g = d_out.row(i);
        let row = x.row(i);
        let (m, is) = (mean[i], inv_std[i]);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (row[j] - m) * is;
            let dxhat = g[j] * scale[j];
            dscale[j] += g[j] * xhat;
            dbias[j] += g[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let out = dx.row_mut(i);
        for j in 0..d {
            let xhat = (row[j] - m) * is;
            let dxhat = g[j] * scale[j];
            out[j] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dscale, dbias)
}

// ----- parameters -----

#[derive(Debug, Clone, PartialEq)]
pub struct HstuLayerParams {
    pub norm_scale: Vec<f64>,
    pub norm_bias: Vec<f64>,
    /// Fused projection, `d × 4d`; output columns split as (U, V, Q, K).
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub gate_scale: Vec<f64>,
    pub gate_bias: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl HstuLayerParams {
    pub fn d(&self) -> usize {
        self.w1.rows()
    }

    /// All-zero weights; the layer is then an exact identity map.
    pub fn zeros(d: usize) -> Self {
        HstuLayerParams {
            norm_scale: vec![1.0; d],
            norm_bias: vec![0.0; d],
            w1: Mat::zeros(d, 4 * d),
            b1: vec![0.0; 4 * d],
            gate_scale: vec![1.0; d],
            gate_bias: vec![0.0; d],
            w2: Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    /// Truncated-normal weight init (std 0.02, clipped at two sigma); norm
    /// scales start at one, all biases at zero.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(d);
        fill_trunc_normal(p.w1.data_mut(), 0.02, rng);
        fill_trunc_normal(p.w2.data_mut(), 0.02, rng);
        p
    }
}

pub fn fill_trunc_normal(buf: &mut [f64], std: f64, rng: &mut impl Rng) {
    for v in buf {
        loop {
            // Box-Muller; redraw outside two sigma.
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                *v = z * std;
                break;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerOpts {
    pub heads: usize,
    /// Scale attention scores by 1/L.
    pub normalize: bool,
    /// Run the two projection GEMMs through emulated row-quantized FP8.
    pub fp8: bool,
}

impl Default for LayerOpts {
    fn default() -> Self {
        LayerOpts { heads: 4, normalize: true, fp8: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    Full,
    Minimal,
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Full {
        x: Mat,
        ln_mean: Vec<f64>,
        ln_inv_std: Vec<f64>,
        normed: Mat,
        /// Pre-activation fused projection output, `L × 4d`.
        fused: Mat,
        attn: Mat,
        y: Mat,
    },
    Minimal {
        x: Mat,
        ln_mean: Vec<f64>,
        ln_inv_std: Vec<f64>,
        u: Mat,
        attn: Mat,
    },
}

impl LayerCache {
    /// Exact bytes held by the cached tensors.
    pub fn bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        match self {
            LayerCache::Full { x, ln_mean, ln_inv_std, normed, fused, attn, y } => {
                (x.data().len()
                    + ln_mean.len()
                    + ln_inv_std.len()
                    + normed.data().len()
                    + fused.data().len()
                    + attn.data().len()
                    + y.data().len())
                    * f
            }
            LayerCache::Minimal { x, ln_mean, ln_inv_std, u, attn } => {
                (x.data().len() + ln_mean.len() + ln_inv_std.len() + u.data().len() + attn.data().len()) * f
            }
        }
    }
}

/// Per-layer parameter gradients, same shapes as [`HstuLayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub norm_scale: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub gate_scale: Vec<f64>,
    pub gate_bias: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros(d: usize) -> Self {
        LayerGrads {
            norm_scale: vec![0.0; d],
            norm_bias: vec![0.0; d],
            w1: Mat::zeros(d, 4 * d),
            b1: vec![0.0; 4 * d],
            gate_scale: vec![0.0; d],
            gate_bias: vec![0.0; d],
            w2: Mat::zeros(d, d),
            b2: vec![0.0; d],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        add_vec(&mut self.norm_scale, &other.norm_scale);
        add_vec(&mut self.norm_bias, &other.norm_bias);
        self.w1.add_assign(&other.w1);
        add_vec(&mut self.b1, &other.b1);
        add_vec(&mut self.gate_scale, &other.gate_scale);
        add_vec(&mut self.gate_bias, &other.gate_bias);
        self.w2.add_assign(&other.w2);
        add_vec(&mut self.b2, &other.b2);
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

// ----- forward -----

fn check_layer_shapes(x: &Mat, params: &HstuLayerParams, opts: &LayerOpts) -> Result<usize> {
    let d = params.d();
    if x.cols() != d {
        return Err(Error::Dimension(format!(
            "input width {} does not match layer width {}",
            x.cols(),
            d
        )));
    }
    if opts.heads == 0 || d % opts.heads != 0 {
        return Err(Error::Config(format!("head count {} must divide width {}", opts.heads, d)));
    }
    Ok(d)
}

/// `x·w + b`, optionally through the emulated FP8 path with a 1D bias.
fn affine(x: &Mat, w: &Mat, b: &[f64], fp8: bool) -> Result<Mat> {
    if fp8 {
        let xq = fp8_quantize_rowwise(x)?;
        let wtq = fp8_quantize_rowwise(&transpose(w))?;
        fp8_gemm_emulated(&xq, &wtq, GemmBias::Row(b))
    } else {
        let mut out = x.matmul(w);
        out.add_row_vec(b);
        Ok(out)
    }
}

/// `y·w + bias2d` where the 2D bias carries the residual (`x` plus the row
/// bias), matching the fused-epilogue formulation of the output GEMM.
fn output_affine(y: &Mat, w: &Mat, b: &[f64], x: &Mat, fp8: bool) -> Result<Mat> {
    let mut bias2d = x.clone();
    bias2d.add_row_vec(b);
    if fp8 {
        let yq = fp8_quantize_rowwise(y)?;
        let wtq = fp8_quantize_rowwise(&transpose(w))?;
        fp8_gemm_emulated(&yq, &wtq, GemmBias::Full(&bias2d))
    } else {
        let mut out = y.matmul(w);
        out.add_assign(&bias2d);
        Ok(out)
    }
}

fn transpose(m: &Mat) -> Mat {
    Mat::from_fn(m.cols(), m.rows(), |i, j| m.get(j, i))
}

fn silu_mat(m: &Mat) -> Mat {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = silu(*v);
    }
    out
}

/// Multi-head attention over the (q, k, v) column blocks of the activated
/// projection. Heads are contiguous `d/H`-wide column groups.
fn multi_head_attention(
    g: &Mat,
    d: usize,
    spec: &MaskSpec,
    opts: &LayerOpts,
) -> Result<Mat> {
    let l = g.rows();
    let dh = d / opts.heads;
    let spec = spec.clamped_for_len(l.max(1));
    let mut attn = Mat::zeros(l, d);
    for h in 0..opts.heads {
        let (qs, ks, vs) = (2 * d + h * dh, 3 * d + h * dh, d + h * dh);
        let qh = g.slice_cols(qs, qs + dh);
        let kh = g.slice_cols(ks, ks + dh);
        let vh = g.slice_cols(vs, vs + dh);
        let out = attention_forward(&qh, &kh, &vh, &spec, opts.normalize)?;
        attn.set_cols(h * dh, &out.out);
    }
    Ok(attn)
}

/// Forward pass. Returns the output sequence and the cache requested by
/// `cache_mode`.
pub fn layer_forward(
    x: &Mat,
    params: &HstuLayerParams,
    spec: &MaskSpec,
    opts: &LayerOpts,
    cache_mode: CacheMode,
) -> Result<(Mat, LayerCache)> {
    let d = check_layer_shapes(x, params, opts)?;
    let (normed, ln_mean, ln_inv_std) = ln_forward(x, &params.norm_scale, &params.norm_bias);
    let fused = affine(&normed, &params.w1, &params.b1, opts.fp8)?;
    let g = silu_mat(&fused);
    let attn = multi_head_attention(&g, d, spec, opts)?;
    let (gated, _, _) = ln_forward(&attn, &params.gate_scale, &params.gate_bias);
    let u = g.slice_cols(0, d);
    let y = gated.hadamard(&u);
    let out = output_affine(&y, &params.w2, &params.b2, x, opts.fp8)?;
    let cache = match cache_mode {
        CacheMode::Full => LayerCache::Full {
            x: x.clone(),
            ln_mean,
            ln_inv_std,
            normed,
            fused,
            attn,
            y,
        },
        CacheMode::Minimal => LayerCache::Minimal { x: x.clone(), ln_mean, ln_inv_std, u, attn },
    };
    Ok((out, cache))
}

// ----- backward -----

/// Shared backward arithmetic. Both cache policies funnel here with the same
/// tensors (saved or rematerialized), so gradients agree bitwise.
#[allow(clippy::too_many_arguments)]
fn backward_core(
    d_out: &Mat,
    x: &Mat,
    ln_mean: &[f64],
    ln_inv_std: &[f64],
    normed: &Mat,
    fused: &Mat,
    attn: &Mat,
    y: &Mat,
    params: &HstuLayerParams,
    spec: &MaskSpec,
    opts: &LayerOpts,
) -> Result<(Mat, LayerGrads)> {
    let d = params.d();
    let l = x.rows();
    let dh = d / opts.heads;
    let mut grads = LayerGrads::zeros(d);

    // out = y·W2 + b2 + x
    let mut dx = d_out.clone();
    grads.w2 = y.t_matmul(d_out);
    grads.b2 = d_out.col_sum();
    let dy = d_out.matmul_bt(&params.w2);

    // y = LayerNorm(attn) ⊙ u; recompute the gate norm from attn.
    let (gated, g_mean, g_inv) = ln_forward(attn, &params.gate_scale, &params.gate_bias);
    let g = silu_mat(fused);
    let u = g.slice_cols(0, d);
    let dgated = dy.hadamard(&u);
    let du = dy.hadamard(&gated);
    let (dattn, dgscale, dgbias) = ln_backward(&dgated, attn, &g_mean, &g_inv, &params.gate_scale);
    grads.gate_scale = dgscale;
    grads.gate_bias = dgbias;

    // Multi-head attention backward; scores recomputed inside.
    let spec_l = spec.clamped_for_len(l.max(1));
    let mut dg = Mat::zeros(l, 4 * d);
    dg.set_cols(0, &du);
    for h in 0..opts.heads {
        let (qs, ks, vs) = (2 * d + h * dh, 3 * d + h * dh, d + h * dh);
        let qh = g.slice_cols(qs, qs + dh);
        let kh = g.slice_cols(ks, ks + dh);
        let vh = g.slice_cols(vs, vs + dh);
        let dah = dattn.slice_cols(h * dh, (h + 1) * dh);
        let (dqh, dkh, dvh) = attention_backward(&dah, &qh, &kh, &vh, &spec_l, opts.normalize)?;
        dg.set_cols(qs, &dqh);
        dg.set_cols(ks, &dkh);
        dg.set_cols(vs, &dvh);
    }

    // Through the SiLU on the fused projection.
    let mut ds = dg;
    for (s, pre) in ds.data_mut().iter_mut().zip(fused.data()) {
        *s *= silu_grad(*pre);
    }
    grads.b1 = ds.col_sum();
    grads.w1 = normed.t_matmul(&ds);
    let dnormed = ds.matmul_bt(&params.w1);

    // Through the input norm, then the residual.
    let (dx_ln, dnscale, dnbias) = ln_backward(&dnormed, x, ln_mean, ln_inv_std, &params.norm_scale);
    grads.norm_scale = dnscale;
    grads.norm_bias = dnbias;
    dx.add_assign(&dx_ln);
    Ok((dx, grads))
}

/// Backward from a full cache. Errors if given a minimal cache.
pub fn layer_backward(
    d_out: &Mat,
    cache: &LayerCache,
    params: &HstuLayerParams,
    spec: &MaskSpec,
    opts: &LayerOpts,
) -> Result<(Mat, LayerGrads)> {
    match cache {
        LayerCache::Full { x, ln_mean, ln_inv_std, normed, fused, attn, y } => {
            backward_core(d_out, x, ln_mean, ln_inv_std, normed, fused, attn, y, params, spec, opts)
        }
        LayerCache::Minimal { .. } => Err(Error::State(
            "full-cache backward called with a minimal cache; use the rematerializing backward".into(),
        )),
    }
}

/// Backward from a minimal cache: rebuilds the normalized input from the
/// saved statistics, re-runs the fused projection GEMM to recover the
/// pre-activations, and recomputes `y` from the saved `u` and `attn` before
/// running the shared backward arithmetic. Errors if given a full cache.
pub fn layer_backward_remat(
    d_out: &Mat,
    cache: &LayerCache,
    params: &HstuLayerParams,
    spec: &MaskSpec,
    opts: &LayerOpts,
) -> Result<(Mat, LayerGrads)> {
    match cache {
        LayerCache::Minimal { x, ln_mean, ln_inv_std, u, attn } => {
            let (gated, _, _) = ln_forward(attn, &params.gate_scale, &params.gate_bias);
            let y = gated.hadamard(u);
            let normed = ln_rebuild(x, ln_mean, ln_inv_std, &params.norm_scale, &params.norm_bias);
            let fused = affine(&normed, &params.w1, &params.b1, opts.fp8)?;
            backward_core(d_out, x, ln_mean, ln_inv_std, &normed, &fused, attn, &y, params, spec, opts)
        }
        LayerCache::Full { .. } => Err(Error::State(
            "rematerializing backward called with a full cache; use the standard backward".into(),
        )),
    }
}

//! Pointwise attention under causal and semi-local masks.
//!
//! Positions are time-ascending: row 0 is the earliest event and row L-1 the
//! latest. A query at position `q` may attend to key `k` only if `k <= q`
//! (causality). The semi-local mask additionally requires the key to sit in
//! a recency band of width `K1` behind the query (`q - k <= K1`) or in a
//! global window of `K2` anchored keys: the first `K2` positions
//! ([`Anchor::Start`]) or the last `K2` ([`Anchor::End`]).
//!
//! Scores are not softmaxed. The output row is
//!
//! ```text
//! A[q] = sum over allowed k of silu(<Q[q], K[k]>) * c * V[k]
//! ```
//!
//! with `c = 1/L` when length normalization is on (the default) and `c = 1`
//! otherwise. Work is proportional to the number of allowed pairs: the
//! forward pass enumerates exactly the allowed key set per query, never
//! touching masked pairs, and reports how many pairs it visited so tests can
//! pin the visit count to [`mask_nnz`].

use crate::error::{Error, Result};
use crate::mat::{axpy, dot, Mat};
use serde::{Deserialize, Serialize};

/// Which end of the sequence the K2 global keys attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Global keys are the earliest `K2` positions.
    #[default]
    Start,
    /// Global keys are the latest `K2` positions.
    End,
}

/// Attention mask family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Every `k <= q` is allowed.
    FullCausal,
    /// Recency band of width `k1` plus `k2` anchored global keys.
    SemiLocal {
        k1: usize,
        k2: usize,
        #[serde(default)]
        anchor: Anchor,
    },
}

impl MaskSpec {
    pub fn semi_local(k1: usize, k2: usize, anchor: Anchor) -> Self {
        MaskSpec::SemiLocal { k1, k2, anchor }
    }

    /// Clamps window parameters to the sequence length, preserving the mask's
    /// meaning: a band or global window wider than the sequence is exactly a
    /// window of width `L`. Model code uses this at the config/data boundary
    /// so a stack configured with wide windows still accepts short sequences,
    /// while the raw mask queries below reject out-of-range parameters.
    pub fn clamped_for_len(&self, l: usize) -> MaskSpec {
        match *self {
            MaskSpec::FullCausal => MaskSpec::FullCausal,
            MaskSpec::SemiLocal { k1, k2, anchor } => MaskSpec::SemiLocal {
                k1: k1.min(l),
                k2: k2.min(l),
                anchor,
            },
        }
    }

    fn validate(&self, l: usize) -> Result<()> {
        if l == 0 {
            return Err(Error::Domain("mask queries need L >= 1".into()));
        }
        if let MaskSpec::SemiLocal { k1, k2, .. } = *self {
            if k1 > l || k2 > l {
                return Err(Error::Config(format!(
                    "window parameters K1={k1}, K2={k2} exceed sequence length {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether query `q` may attend to key `k` in a length-`L` sequence.
pub fn mask_allows(spec: &MaskSpec, l: usize, q: usize, k: usize) -> Result<bool> {
    spec.validate(l)?;
    if q >= l || k >= l {
        return Err(Error::IndexOutOfRange(format!(
            "(q={q}, k={k}) outside a length-{l} sequence"
        )));
    }
    if k > q {
        return Ok(false);
    }
    Ok(match *spec {
        MaskSpec::FullCausal => true,
        MaskSpec::SemiLocal { k1, k2, anchor } => {
            let in_band = q - k <= k1;
            let global = match anchor {
                Anchor::Start => k < k2,
                Anchor::End => k2 > 0 && k >= l - k2,
            };
            in_band || global
        }
    })
}

/// The allowed key set of query `q` as up to two disjoint ascending ranges.
///
/// Enumerating these ranges visits every allowed key exactly once. When the
/// windows cover the whole causal triangle the single range `0..=q` comes
/// back, in ascending order, so value sums match full-causal bitwise.
fn allowed_ranges(spec: &MaskSpec, l: usize, q: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match *spec {
        MaskSpec::FullCausal => (0..q + 1, 0..0),
        MaskSpec::SemiLocal { k1, k2, anchor } => {
            let band_start = q.saturating_sub(k1);
            match anchor {
                Anchor::Start => {
                    let g_end = k2.min(q + 1);
                    (0..g_end, band_start.max(g_end)..q + 1)
                }
                Anchor::End => {
                    let g_start = l - k2; // k2 <= l by validation
                    let start = if k2 > 0 && q >= g_start {
                        band_start.min(g_start)
                    } else {
                        band_start
                    };
                    (start..q + 1, 0..0)
                }
            }
        }
    }
}

/// Number of keys visible to query `q`; closed form, O(1).
pub fn mask_row_count(spec: &MaskSpec, l: usize, q: usize) -> Result<usize> {
    spec.validate(l)?;
    if q >= l {
        return Err(Error::IndexOutOfRange(format!("q={q} outside a length-{l} sequence")));
    }
    let (a, b) = allowed_ranges(spec, l, q);
    Ok(a.len() + b.len())
}

/// Total allowed (q, k) pairs for a length-`L` sequence; exact.
///
/// Full-causal is the triangle `L(L+1)/2`. For the start-anchored semi-local
/// mask the per-row count is `min(q+1, W)` with `W = K1 + K2 + 1`, giving
/// `W(W+1)/2 + (L-W)·W` once `L >= W`: sparsity grows linearly in `L` at
/// slope `W`. The end-anchored variant sums its per-row closed form.
pub fn mask_nnz(spec: &MaskSpec, l: usize) -> Result<u64> {
    spec.validate(l)?;
    let l_u = l as u64;
    Ok(match *spec {
        MaskSpec::FullCausal => l_u * (l_u + 1) / 2,
        MaskSpec::SemiLocal { k1, k2, anchor: Anchor::Start } => {
            let w = (k1 + k2 + 1) as u64;
            if l_u <= w {
                l_u * (l_u + 1) / 2
            } else {
                w * (w + 1) / 2 + (l_u - w) * w
            }
        }
        MaskSpec::SemiLocal { anchor: Anchor::End, .. } => {
            let mut total = 0u64;
            for q in 0..l {
                let (a, b) = allowed_ranges(spec, l, q);
                total += (a.len() + b.len()) as u64;
            }
            total
        }
    })
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Forward result: the attention output and the number of (q, k) pairs the
/// kernel actually visited.
#[derive(Debug, Clone)]
pub struct AttnOut {
    pub out: Mat,
    pub visited: u64,
}

fn check_qkv(q: &Mat, k: &Mat, v: &Mat) -> Result<usize> {
    let l = q.rows();
    if k.rows() != l || v.rows() != l || k.cols() != q.cols() || v.cols() != q.cols() {
        return Err(Error::Dimension(format!(
            "Q ({}x{}), K ({}x{}), V ({}x{}) must share one shape",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(l)
}

/// Single-head masked attention forward.
///
/// `normalize` selects the `1/L` score scaling. The per-query loops below
/// enumerate only allowed keys; `visited` in the result counts them exactly.
pub fn attention_forward(q: &Mat, k: &Mat, v: &Mat, spec: &MaskSpec, normalize: bool) -> Result<AttnOut> {
    let l = check_qkv(q, k, v)?;
    let mut out = Mat::zeros(l, v.cols());
    if l == 0 {
        return Ok(AttnOut { out, visited: 0 });
    }
    spec.validate(l)?;
    let c = if normalize { 1.0 / l as f64 } else { 1.0 };
    let mut visited = 0u64;
    for qi in 0..l {
        let q_row = q.row(qi);
        let (ra, rb) = allowed_ranges(spec, l, qi);
        for ki in ra.chain(rb) {
            let s = dot(q_row, k.row(ki));
            let w = silu(s) * c;
            axpy(w, v.row(ki), out.row_mut(qi));
            visited += 1;
        }
    }
    Ok(AttnOut { out, visited })
}

/// Gradients of the attention output with respect to Q, K, and V.
///
/// Scores are recomputed from Q and K pair by pair (they are never stored),
/// so the only inputs needed are the same tensors the forward consumed.
pub fn attention_backward(
    d_out: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    spec: &MaskSpec,
    normalize: bool,
) -> Result<(Mat, Mat, Mat)> {
    let l = check_qkv(q, k, v)?;
    if d_out.rows() != l || d_out.cols() != v.cols() {
        return Err(Error::Dimension("d_out shape must match the attention output".into()));
    }
    let mut dq = Mat::zeros(l, q.cols());
    let mut dk = Mat::zeros(l, k.cols());
    let mut dv = Mat::zeros(l, v.cols());
    if l == 0 {
        return Ok((dq, dk, dv));
    }
    spec.validate(l)?;
    let c = if normalize { 1.0 / l as f64 } else { 1.0 };
    for qi in 0..l {
        let q_row = q.row(qi);
        let g_row = d_out.row(qi);
        let (ra, rb) = allowed_ranges(spec, l, qi);
        for ki in ra.chain(rb) {
            let s = dot(q_row, k.row(ki));
            // dL/dw through A[q] += w * V[k], then through w = silu(s) * c.
            let dw = dot(g_row, v.row(ki));
            let ds = silu_grad(s) * c * dw;
            axpy(silu(s) * c, g_row, dv.row_mut(ki));
            axpy(ds, k.row(ki), dq.row_mut(qi));
            axpy(ds, q_row, dk.row_mut(ki));
        }
    }
    Ok((dq, dk, dv))
}

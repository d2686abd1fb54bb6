//! Evaluation metrics and analytic cost accounting.
//!
//! Normalized entropy is the mean binary cross-entropy of the predictions
//! divided by the entropy of the label base rate: 1.0 means no better than
//! predicting the positive rate, below 1.0 is real signal, and a perfect
//! predictor approaches 0. Predictions are clamped away from 0 and 1 before
//! the logs.
//!
//! FLOP counts are exact formulas, not measurements: two flops per
//! multiply-add in the GEMMs, and a per-visited-pair cost in attention that
//! follows the mask's nonzero count, so window shape feeds straight into the
//! cost model.

use crate::attention::{mask_nnz, MaskSpec};
use crate::error::{Error, Result};

pub const PRED_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy over (prediction, label) pairs, in nats.
pub fn mean_bce(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Domain("no predictions".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        if !(y == 0.0 || y == 1.0) {
            return Err(Error::Domain(format!("label {y} is not binary")));
        }
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("prediction {p} is not a probability")));
        }
        let p = p.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / preds.len() as f64)
}

/// Cross-entropy normalized by the entropy of the base rate. Errors when
/// the labels are single-class (the base-rate entropy would be zero).
pub fn normalized_entropy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let ce = mean_bce(preds, labels)?;
    let base = labels.iter().sum::<f64>() / labels.len() as f64;
    if base == 0.0 || base == 1.0 {
        return Err(Error::Domain("labels are single-class; base-rate entropy is zero".into()));
    }
    let h = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
    Ok(ce / h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopMode {
    Inference,
    /// Forward plus backward, counted as three times the forward cost.
    Training,
}

pub const TRAIN_FLOP_FACTOR: f64 = 3.0;

/// Itemized flop counts for one layer applied to one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerFlops {
    pub gemm_fused: f64,
    pub gemm_out: f64,
    pub attention: f64,
}

impl LayerFlops {
    pub fn total(&self) -> f64 {
        self.gemm_fused + self.gemm_out + self.attention
    }
}

/// Exact forward flops for one layer on a length-`l` sequence. The mask is
/// clamped to the sequence the way the layer itself clamps it.
pub fn flops_layer(l: usize, d: usize, heads: usize, spec: &MaskSpec) -> Result<LayerFlops> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("head count {heads} must divide width {d}")));
    }
    if l == 0 {
        return Ok(LayerFlops { gemm_fused: 0.0, gemm_out: 0.0, attention: 0.0 });
    }
    let dh = d / heads;
    let nnz = mask_nnz(&spec.clamped_for_len(l), l)? as f64;
    let (lf, df) = (l as f64, d as f64);
    Ok(LayerFlops {
        gemm_fused: 2.0 * lf * df * 4.0 * df,
        gemm_out: 2.0 * lf * df * df,
        attention: heads as f64 * nnz * (4.0 * dh as f64 + 4.0),
    })
}

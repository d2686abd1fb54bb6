//! Full model: embedding, staged layer stacks, truncation boundaries,
//! optional multi-branch fusion, and per-task heads.
//!
//! A tower is a sequence of stages; each stage owns a run of identical
//! layers and a mask. A stage may start by truncating the hidden sequence,
//! keeping a subset of rows chosen by its selection policy; the candidate
//! suffix always survives truncation, so heads can score every candidate no
//! matter how aggressively the earlier history is cut. The first stage never
//! truncates.
//!
//! With one tower, candidate rows of the final hidden state feed the task
//! heads directly. With several (each branch reading its own filtered view
//! of the event stream), candidate rows are concatenated across branches and
//! fused by a learned linear map back to width `d` first.
//!
//! Parameters live in plain `Vec<f64>`/`Mat` buffers. The tensor visitor
//! hands out (name, shape, buffer) triples in a stable order, which is what
//! the optimizer, checkpointing, and gradient reductions iterate over; a
//! zero-initialized clone of the model doubles as its gradient container.

use crate::attention::MaskSpec;
use crate::error::{Error, Result};
use crate::input::{embed_backward, embed_sequence, EmbeddingTables, EventSequence};
use crate::layer::{
    layer_backward, layer_backward_remat, layer_forward, CacheMode, HstuLayerParams, LayerCache,
    LayerOpts,
};
use crate::mat::Mat;
use crate::metrics::{flops_layer, FlopMode, TRAIN_FLOP_FACTOR};
use crate::rng;
use crate::sampling::standard_sl_indices;
use serde::{Deserialize, Serialize};

/// Row-selection policy at a truncation boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationSelect {
    /// Keep the latest rows.
    Latest,
    /// Re-apply stochastic length sampling to the hidden rows.
    DoubleSl,
    /// Learned compression; declared but not implemented.
    Compress,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub keep: usize,
    #[serde(default = "default_select")]
    pub select: TruncationSelect,
}

fn default_select() -> TruncationSelect {
    TruncationSelect::Latest
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub layers: usize,
    pub mask: MaskSpec,
    #[serde(default)]
    pub truncate: Option<TruncationSpec>,
}

/// Which events a branch reads; the trainer filters sequences with this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    All,
    /// History restricted to events carrying this action id (candidates are
    /// always included).
    Action(u32),
}

impl Default for EventSource {
    fn default() -> Self {
        EventSource::All
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    #[serde(default)]
    pub source: EventSource,
    pub stages: Vec<StageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub item_vocab: usize,
    pub action_vocab: usize,
    pub tasks: usize,
    #[serde(default = "default_true")]
    pub attn_normalize: bool,
    #[serde(default)]
    pub fp8: bool,
    pub towers: Vec<TowerConfig>,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of head count {}",
                self.d, self.heads
            )));
        }
        if self.tasks == 0 {
            return Err(Error::Config("need at least one task".into()));
        }
        if self.item_vocab == 0 || self.action_vocab == 0 {
            return Err(Error::Config("vocabularies must be non-empty".into()));
        }
        if self.towers.is_empty() {
            return Err(Error::Config("need at least one tower".into()));
        }
        for (t, tower) in self.towers.iter().enumerate() {
            if tower.stages.is_empty() {
                return Err(Error::Config(format!("tower {t} has no stages")));
            }
            for (s, stage) in tower.stages.iter().enumerate() {
                if stage.layers == 0 {
                    return Err(Error::Config(format!("tower {t} stage {s} has no layers")));
                }
                if let Some(tr) = &stage.truncate {
                    if s == 0 {
                        return Err(Error::Config(format!(
                            "tower {t}: the first stage must not truncate"
                        )));
                    }
                    if tr.keep == 0 {
                        return Err(Error::Config(format!(
                            "tower {t} stage {s}: truncation must keep at least one row"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn opts(&self) -> LayerOpts {
        LayerOpts { heads: self.heads, normalize: self.attn_normalize, fp8: self.fp8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `(towers·d) × d`.
    pub w: Mat,
    pub b: Vec<f64>,
}

/// The model: configuration plus every learned tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Hstu {
    pub cfg: ModelConfig,
    pub tables: EmbeddingTables,
    /// One flat layer list per tower, stage runs concatenated.
    pub towers: Vec<Vec<HstuLayerParams>>,
    /// Present exactly when there is more than one tower.
    pub fusion: Option<FusionParams>,
    pub heads: Vec<TaskHead>,
}

impl Hstu {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[0x1417]);
        let tables = EmbeddingTables::init(cfg.item_vocab, cfg.action_vocab, cfg.d, &mut r);
        let towers: Vec<Vec<HstuLayerParams>> = cfg
            .towers
            .iter()
            .map(|t| {
                let n: usize = t.stages.iter().map(|s| s.layers).sum();
                (0..n).map(|_| HstuLayerParams::init(cfg.d, &mut r)).collect()
            })
            .collect();
        let fusion = if cfg.towers.len() > 1 {
            let mut w = Mat::zeros(cfg.towers.len() * cfg.d, cfg.d);
            crate::layer::fill_trunc_normal(w.data_mut(), 0.02, &mut r);
            Some(FusionParams { w, b: vec![0.0; cfg.d] })
        } else {
            None
        };
        let heads = (0..cfg.tasks)
            .map(|_| {
                let mut w = vec![0.0; cfg.d];
                crate::layer::fill_trunc_normal(&mut w, 0.02, &mut r);
                TaskHead { w, b: 0.0 }
            })
            .collect();
        Ok(Hstu { cfg, tables, towers, fusion, heads })
    }

    /// Same shapes, all learned values zero. Used as a gradient container
    /// and as optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, _, buf) in z.tensors_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Every learned tensor as (name, shape, values), in a stable order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        out.push(("embed.item".into(), vec![self.tables.item.rows(), self.tables.item.cols()], self.tables.item.data()));
        out.push(("embed.action".into(), vec![self.tables.action.rows(), self.tables.action.cols()], self.tables.action.data()));
        for (t, tower) in self.towers.iter().enumerate() {
            for (l, p) in tower.iter().enumerate() {
                let d = p.d();
                let base = format!("tower{t}.layer{l}");
                out.push((format!("{base}.norm_scale"), vec![d], &p.norm_scale));
                out.push((format!("{base}.norm_bias"), vec![d], &p.norm_bias));
                out.push((format!("{base}.w1"), vec![d, 4 * d], p.w1.data()));
                out.push((format!("{base}.b1"), vec![4 * d], &p.b1));
                out.push((format!("{base}.gate_scale"), vec![d], &p.gate_scale));
                out.push((format!("{base}.gate_bias"), vec![d], &p.gate_bias));
                out.push((format!("{base}.w2"), vec![d, d], p.w2.data()));
                out.push((format!("{base}.b2"), vec![d], &p.b2));
            }
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.w".into(), vec![f.w.rows(), f.w.cols()], f.w.data()));
            out.push(("fusion.b".into(), vec![f.b.len()], &f.b));
        }
        for (k, h) in self.heads.iter().enumerate() {
            out.push((format!("head{k}.w"), vec![h.w.len()], &h.w));
            out.push((format!("head{k}.b"), vec![1], std::slice::from_ref(&h.b)));
        }
        out
    }

    /// Mutable twin of [`Hstu::tensors`]; same names, same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        let (ir, ic) = (self.tables.item.rows(), self.tables.item.cols());
        let (ar, ac) = (self.tables.action.rows(), self.tables.action.cols());
        out.push(("embed.item".into(), vec![ir, ic], self.tables.item.data_mut()));
        out.push(("embed.action".into(), vec![ar, ac], self.tables.action.data_mut()));
        for (t, tower) in self.towers.iter_mut().enumerate() {
            for (l, p) in tower.iter_mut().enumerate() {
                let d = p.w1.rows();
                let base = format!("tower{t}.layer{l}");
                out.push((format!("{base}.norm_scale"), vec![d], p.norm_scale.as_mut_slice()));
                out.push((format!("{base}.norm_bias"), vec![d], p.norm_bias.as_mut_slice()));
                out.push((format!("{base}.w1"), vec![d, 4 * d], p.w1.data_mut()));
                out.push((format!("{base}.b1"), vec![4 * d], p.b1.as_mut_slice()));
                out.push((format!("{base}.gate_scale"), vec![d], p.gate_scale.as_mut_slice()));
                out.push((format!("{base}.gate_bias"), vec![d], p.gate_bias.as_mut_slice()));
                out.push((format!("{base}.w2"), vec![d, d], p.w2.data_mut()));
                out.push((format!("{base}.b2"), vec![d], p.b2.as_mut_slice()));
            }
        }
        if let Some(f) = &mut self.fusion {
            let (fr, fc) = (f.w.rows(), f.w.cols());
            out.push(("fusion.w".into(), vec![fr, fc], f.w.data_mut()));
            out.push(("fusion.b".into(), vec![fc], f.b.as_mut_slice()));
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            let d = h.w.len();
            out.push((format!("head{k}.w"), vec![d], h.w.as_mut_slice()));
            out.push((format!("head{k}.b"), vec![1], std::slice::from_mut(&mut h.b)));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

/// Saved state from one forward call.
#[derive(Debug, Clone)]
pub struct ModelCache {
    towers: Vec<TowerCache>,
    /// Candidate rows per tower, concatenated: `C × (towers·d)`.
    concat: Mat,
    /// Head input after fusion (equals `concat` for a single tower).
    h: Mat,
    logits: Mat,
    pub n_candidates: usize,
}

#[derive(Debug, Clone)]
struct TowerCache {
    layer_caches: Vec<LayerCache>,
    /// Per stage: `None` for no truncation, else the pre-truncation row
    /// count and the kept row indices.
    stage_rows: Vec<Option<(usize, Vec<usize>)>>,
}

impl Hstu {
    /// Runs one group of per-tower sequences through the model and returns
    /// candidate probabilities (`C × tasks`). All towers must present the
    /// same number of candidates. `selection_seed` fixes any stochastic
    /// truncation choices, keeping the pass reproducible.
    pub fn forward(
        &self,
        seqs: &[EventSequence],
        cache_mode: CacheMode,
        selection_seed: u64,
    ) -> Result<(Mat, ModelCache)> {
        if seqs.len() != self.towers.len() {
            return Err(Error::Dimension(format!(
                "{} sequences for {} towers",
                seqs.len(),
                self.towers.len()
            )));
        }
        let c = seqs[0].n_candidates;
        if seqs.iter().any(|s| s.n_candidates != c) {
            return Err(Error::Config("towers disagree on candidate count".into()));
        }
        let d = self.cfg.d;
        let opts = self.cfg.opts();
        let mut tower_caches = Vec::with_capacity(self.towers.len());
        let mut concat = Mat::zeros(c, self.towers.len() * d);
        for (t, (params, seq)) in self.towers.iter().zip(seqs).enumerate() {
            let stages = &self.cfg.towers[t].stages;
            let mut x = embed_sequence(seq, &self.tables)?;
            let mut layer_caches = Vec::with_capacity(params.len());
            let mut stage_rows = Vec::with_capacity(stages.len());
            let mut cursor = 0usize;
            for (s, stage) in stages.iter().enumerate() {
                if let Some(tr) = &stage.truncate {
                    if tr.keep < c {
                        return Err(Error::Config(format!(
                            "tower {t} stage {s}: keeping {} rows would drop candidates ({c})",
                            tr.keep
                        )));
                    }
                    let pre = x.rows();
                    if tr.keep < pre {
                        let idx = match tr.select {
                            TruncationSelect::Latest => (pre - tr.keep..pre).collect::<Vec<_>>(),
                            TruncationSelect::DoubleSl => {
                                let mut r =
                                    rng::stream(selection_seed, &[t as u64, s as u64]);
                                standard_sl_indices(pre, tr.keep, c, &mut r)?
                            }
                            TruncationSelect::Compress => {
                                return Err(Error::Unsupported(
                                    "compress truncation is declared but not implemented".into(),
                                ))
                            }
                        };
                        let mut cut = Mat::zeros(idx.len(), d);
                        for (row, &i) in idx.iter().enumerate() {
                            cut.row_mut(row).copy_from_slice(x.row(i));
                        }
                        x = cut;
                        stage_rows.push(Some((pre, idx)));
                    } else {
                        stage_rows.push(None);
                    }
                } else {
                    stage_rows.push(None);
                }
                for _ in 0..stage.layers {
                    let (nx, cache) =
                        layer_forward(&x, &params[cursor], &stage.mask, &opts, cache_mode)?;
                    x = nx;
                    layer_caches.push(cache);
                    cursor += 1;
                }
            }
            let start = x.rows() - c;
            for row in 0..c {
                concat.row_mut(row)[t * d..(t + 1) * d].copy_from_slice(x.row(start + row));
            }
            tower_caches.push(TowerCache { layer_caches, stage_rows });
        }
        let h = match &self.fusion {
            Some(f) => {
                let mut h = concat.matmul(&f.w);
                h.add_row_vec(&f.b);
                h
            }
            None => concat.clone(),
        };
        let mut logits = Mat::zeros(c, self.cfg.tasks);
        for row in 0..c {
            for (k, head) in self.heads.iter().enumerate() {
                let z = crate::mat::dot(h.row(row), &head.w) + head.b;
                logits.set(row, k, z);
            }
        }
        let probs = Mat::from_fn(c, self.cfg.tasks, |i, j| sigmoid(logits.get(i, j)));
        let cache = ModelCache { towers: tower_caches, concat, h, logits, n_candidates: c };
        Ok((probs, cache))
    }

    /// Multi-task loss (sum over tasks of the mean candidate cross-entropy)
    /// and gradients for every tensor, packed in a zero-initialized clone.
    pub fn backward(
        &self,
        cache: &ModelCache,
        seqs: &[EventSequence],
        labels: &Mat,
    ) -> Result<(f64, Hstu)> {
        let c = cache.n_candidates;
        if c == 0 {
            return Err(Error::Domain("no candidates to score".into()));
        }
        if labels.rows() != c || labels.cols() != self.cfg.tasks {
            return Err(Error::Dimension(format!(
                "labels {}x{} for {} candidates and {} tasks",
                labels.rows(),
                labels.cols(),
                c,
                self.cfg.tasks
            )));
        }
        let (loss, dlogits) = multi_task_loss(&cache.logits, labels)?;
        let mut grads = self.zeros_like();
        let d = self.cfg.d;

        // Heads.
        let mut dh = Mat::zeros(c, d);
        for row in 0..c {
            for (k, head) in self.heads.iter().enumerate() {
                let g = dlogits.get(row, k);
                let gw = &mut grads.heads[k];
                for j in 0..d {
                    gw.w[j] += g * cache.h.get(row, j);
                    dh.row_mut(row)[j] += g * head.w[j];
                }
                gw.b += g;
            }
        }

        // Fusion (or pass-through).
        let dconcat = match &self.fusion {
            Some(f) => {
                let gf = grads.fusion.as_mut().expect("gradient clone keeps fusion");
                gf.w = cache.concat.t_matmul(&dh);
                gf.b = dh.col_sum();
                dh.matmul_bt(&f.w)
            }
            None => dh,
        };

        // Towers, reversed.
        let opts = self.cfg.opts();
        for (t, (params, seq)) in self.towers.iter().zip(seqs).enumerate() {
            let stages = &self.cfg.towers[t].stages;
            let tc = &cache.towers[t];
            let final_len = match tc.layer_caches.last().expect("every tower has layers") {
                LayerCache::Full { x, .. } => x.rows(),
                LayerCache::Minimal { x, .. } => x.rows(),
            };
            let mut dx = Mat::zeros(final_len, d);
            let start = final_len - c;
            for row in 0..c {
                dx.row_mut(start + row)
                    .copy_from_slice(&dconcat.row(row)[t * d..(t + 1) * d]);
            }
            let mut cursor = params.len();
            for (s, stage) in stages.iter().enumerate().rev() {
                for _ in 0..stage.layers {
                    cursor -= 1;
                    let lc = &tc.layer_caches[cursor];
                    let p = &params[cursor];
                    let (ndx, lg) = match lc {
                        LayerCache::Full { .. } => layer_backward(&dx, lc, p, &stage.mask, &opts)?,
                        LayerCache::Minimal { .. } => {
                            layer_backward_remat(&dx, lc, p, &stage.mask, &opts)?
                        }
                    };
                    grads.towers[t][cursor] = layer_grads_into_params(lg);
                    dx = ndx;
                }
                if let Some((pre, idx)) = &tc.stage_rows[s] {
                    let mut scattered = Mat::zeros(*pre, d);
                    for (row, &i) in idx.iter().enumerate() {
                        scattered.row_mut(i).copy_from_slice(dx.row(row));
                    }
                    dx = scattered;
                }
            }
            embed_backward(seq, &dx, &mut grads.tables)?;
        }
        Ok((loss, grads))
    }
}

/// Layer gradients reshaped into the parameter container so the gradient
/// model mirrors the parameter model tensor for tensor.
fn layer_grads_into_params(g: crate::layer::LayerGrads) -> HstuLayerParams {
    HstuLayerParams {
        norm_scale: g.norm_scale,
        norm_bias: g.norm_bias,
        w1: g.w1,
        b1: g.b1,
        gate_scale: g.gate_scale,
        gate_bias: g.gate_bias,
        w2: g.w2,
        b2: g.b2,
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus, `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Sum over tasks of the mean binary cross-entropy over candidates,
/// computed from logits. Returns the loss and `d loss / d logits`.
pub fn multi_task_loss(logits: &Mat, labels: &Mat) -> Result<(f64, Mat)> {
    if logits.rows() != labels.rows() || logits.cols() != labels.cols() {
        return Err(Error::Dimension(format!(
            "logits {}x{} vs labels {}x{}",
            logits.rows(),
            logits.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    if labels.data().iter().any(|&y| !(y == 0.0 || y == 1.0)) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    let (c, tasks) = (logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(c, tasks);
    for k in 0..tasks {
        for i in 0..c {
            let z = logits.get(i, k);
            let y = labels.get(i, k);
            loss += (softplus(z) - y * z) / c as f64;
            dlogits.set(i, k, (sigmoid(z) - y) / c as f64);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss became {loss}")));
    }
    Ok((loss, dlogits))
}

/// Analytic flop count for a whole forward pass over one sequence group,
/// `lengths` giving each tower's (post length-sampling) input length.
/// Projection fusion and head costs are omitted as negligible.
pub fn flops_model(cfg: &ModelConfig, lengths: &[usize], mode: FlopMode) -> Result<f64> {
    cfg.validate()?;
    if lengths.len() != cfg.towers.len() {
        return Err(Error::Dimension(format!(
            "{} lengths for {} towers",
            lengths.len(),
            cfg.towers.len()
        )));
    }
    let mut total = 0.0;
    for (tower, &len) in cfg.towers.iter().zip(lengths) {
        let mut l = len;
        for stage in &tower.stages {
            if let Some(tr) = &stage.truncate {
                l = l.min(tr.keep);
            }
            let per = flops_layer(l, cfg.d, cfg.heads, &stage.mask)?.total();
            total += stage.layers as f64 * per;
        }
    }
    Ok(match mode {
        FlopMode::Inference => total,
        FlopMode::Training => TRAIN_FLOP_FACTOR * total,
    })
}

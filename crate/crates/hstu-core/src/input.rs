//! Event sequences and the embedding merge that turns them into dense rows.
//!
//! A sequence interleaves history events with a protected suffix of
//! candidate events. Every event carries an item id and a (possibly empty)
//! set of action ids. History rows embed as `item[id] + sum of action[a]`
//! over the deduplicated action set; candidate rows embed as the item alone,
//! since their actions are the prediction targets and must not leak in.

use crate::error::{Error, Result};
use crate::jagged::JaggedBatch;
use crate::mat::Mat;
use crate::par::{try_map_indexed, Execution};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One user's chronological event stream. The last `n_candidates` events are
/// the candidate suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSequence {
    pub user_id: u64,
    pub item_ids: Vec<u32>,
    pub action_sets: Vec<Vec<u32>>,
    pub timestamps: Vec<i64>,
    pub n_candidates: usize,
}

impl EventSequence {
    pub fn new(
        user_id: u64,
        item_ids: Vec<u32>,
        action_sets: Vec<Vec<u32>>,
        timestamps: Vec<i64>,
        n_candidates: usize,
    ) -> Result<Self> {
        let n = item_ids.len();
        if action_sets.len() != n || timestamps.len() != n {
            return Err(Error::Dimension(format!(
                "event arrays disagree on length: {} items, {} action sets, {} timestamps",
                n,
                action_sets.len(),
                timestamps.len()
            )));
        }
        if n_candidates > n {
            return Err(Error::Config(format!(
                "candidate suffix {n_candidates} longer than sequence {n}"
            )));
        }
        if timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("timestamps must be non-decreasing".into()));
        }
        Ok(EventSequence { user_id, item_ids, action_sets, timestamps, n_candidates })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn history_len(&self) -> usize {
        self.len() - self.n_candidates
    }

    pub fn is_candidate(&self, i: usize) -> bool {
        i >= self.history_len()
    }

    /// Keeps the events at `indices` (ascending positions into this
    /// sequence). Candidate status is preserved by counting how many kept
    /// positions fall in the old suffix.
    pub fn select(&self, indices: &[usize]) -> Result<EventSequence> {
        let mut kept_candidates = 0;
        let mut last: Option<usize> = None;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange(format!("event {i} of {}", self.len())));
            }
            if let Some(p) = last {
                if i <= p {
                    return Err(Error::Config("selection must be strictly ascending".into()));
                }
            }
            last = Some(i);
            if self.is_candidate(i) {
                kept_candidates += 1;
            }
        }
        EventSequence::new(
            self.user_id,
            indices.iter().map(|&i| self.item_ids[i]).collect(),
            indices.iter().map(|&i| self.action_sets[i].clone()).collect(),
            indices.iter().map(|&i| self.timestamps[i]).collect(),
            kept_candidates,
        )
    }
}

/// Learned item and action embedding tables, both `vocab × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables {
    pub item: Mat,
    pub action: Mat,
}

impl EmbeddingTables {
    pub fn zeros(item_vocab: usize, action_vocab: usize, d: usize) -> Self {
        EmbeddingTables { item: Mat::zeros(item_vocab, d), action: Mat::zeros(action_vocab, d) }
    }

    pub fn init(item_vocab: usize, action_vocab: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(item_vocab, action_vocab, d);
        crate::layer::fill_trunc_normal(t.item.data_mut(), 0.02, rng);
        crate::layer::fill_trunc_normal(t.action.data_mut(), 0.02, rng);
        t
    }

    pub fn d(&self) -> usize {
        self.item.cols()
    }

    pub fn add_assign(&mut self, other: &EmbeddingTables) {
        self.item.add_assign(&other.item);
        self.action.add_assign(&other.action);
    }
}

/// Embeds one sequence into an `L × d` matrix.
pub fn embed_sequence(seq: &EventSequence, tables: &EmbeddingTables) -> Result<Mat> {
    let d = tables.d();
    let mut out = Mat::zeros(seq.len(), d);
    let mut actions = Vec::new();
    for i in 0..seq.len() {
        let item = seq.item_ids[i] as usize;
        if item >= tables.item.rows() {
            return Err(Error::VocabOutOfRange(format!(
                "item id {item} outside vocabulary of {}",
                tables.item.rows()
            )));
        }
        let row = out.row_mut(i);
        row.copy_from_slice(tables.item.row(item));
        if seq.is_candidate(i) {
            continue;
        }
        actions.clear();
        actions.extend_from_slice(&seq.action_sets[i]);
        actions.sort_unstable();
        actions.dedup();
        for &a in &actions {
            let a = a as usize;
            if a >= tables.action.rows() {
                return Err(Error::VocabOutOfRange(format!(
                    "action id {a} outside vocabulary of {}",
                    tables.action.rows()
                )));
            }
            let arow = tables.action.row(a);
            for (o, &v) in row.iter_mut().zip(arow) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Scatter-adds `d_x` back into embedding-table gradients. Accumulation is
/// in-place so a whole batch can share one gradient buffer; call order is
/// the batch order, keeping reductions deterministic.
pub fn embed_backward(seq: &EventSequence, d_x: &Mat, grads: &mut EmbeddingTables) -> Result<()> {
    if d_x.rows() != seq.len() || d_x.cols() != grads.d() {
        return Err(Error::Dimension(format!(
            "gradient shape {}x{} does not match sequence {}x{}",
            d_x.rows(),
            d_x.cols(),
            seq.len(),
            grads.d()
        )));
    }
    let mut actions = Vec::new();
    for i in 0..seq.len() {
        let g = d_x.row(i).to_vec();
        let item = seq.item_ids[i] as usize;
        let irow = grads.item.row_mut(item);
        for (o, &v) in irow.iter_mut().zip(&g) {
            *o += v;
        }
        if seq.is_candidate(i) {
            continue;
        }
        actions.clear();
        actions.extend_from_slice(&seq.action_sets[i]);
        actions.sort_unstable();
        actions.dedup();
        for &a in &actions {
            let arow = grads.action.row_mut(a as usize);
            for (o, &v) in arow.iter_mut().zip(&g) {
                *o += v;
            }
        }
    }
    Ok(())
}

/// Embeds a batch of sequences into one jagged buffer, optionally in
/// parallel. Results are identical across execution strategies.
pub fn embed_batch(
    seqs: &[EventSequence],
    tables: &EmbeddingTables,
    exec: Execution,
) -> Result<JaggedBatch> {
    let mats = try_map_indexed(exec, seqs.len(), |i| embed_sequence(&seqs[i], tables))?;
    JaggedBatch::from_mats(&mats)
}

/// Builds deterministic per-position embeddings for tests and synthetic
/// data without storing a table.
pub fn hashed_test_tables(item_vocab: usize, action_vocab: usize, d: usize, seed: u64) -> EmbeddingTables {
    let mut r = rng::stream(seed, &[0x7ab1e5]);
    EmbeddingTables::init(item_vocab, action_vocab, d, &mut r)
}

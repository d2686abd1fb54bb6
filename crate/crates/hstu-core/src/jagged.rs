//! Jagged batches: variable-length sequences with no padding.
//!
//! A batch of B sequences with lengths `L_0..L_{B-1}` and feature width `d`
//! is one flat value buffer of `(ΣL_i) × d` reals plus an offsets array of
//! B+1 prefix sums. Row 0 of every sequence is its earliest event; later
//! rows are later events. Sequence `i` occupies the contiguous row range
//! `offsets[i]..offsets[i+1]`, so per-sequence views are zero-copy.

use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct JaggedBatch {
    values: Vec<f64>,
    offsets: Vec<usize>,
    d: usize,
}

impl JaggedBatch {
    /// Builds a batch from per-sequence lengths and a flat value buffer.
    ///
    /// `values.len()` must equal `sum(lengths) * d`. `d` must be positive;
    /// zero-length sequences are allowed (their row range is empty).
    pub fn new(lengths: &[usize], values: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("feature width d must be positive".into()));
        }
        let total: usize = lengths.iter().sum();
        if values.len() != total * d {
            return Err(Error::Dimension(format!(
                "value buffer holds {} reals but lengths sum to {} rows of width {}",
                values.len(),
                total,
                d
            )));
        }
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &l in lengths {
            acc += l;
            offsets.push(acc);
        }
        let batch = JaggedBatch { values, offsets, d };
        batch.check_invariants();
        Ok(batch)
    }

    /// Builds a single-sequence batch from a dense matrix.
    pub fn from_mat(m: &Mat) -> Self {
        JaggedBatch {
            values: m.data().to_vec(),
            offsets: vec![0, m.rows()],
            d: m.cols(),
        }
    }

    /// Stacks per-sequence matrices (all with equal width) into one batch.
    pub fn from_mats(mats: &[Mat]) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::Dimension("cannot build a batch from zero matrices".into()));
        }
        let d = mats[0].cols();
        if mats.iter().any(|m| m.cols() != d) {
            return Err(Error::Dimension("all sequences must share feature width".into()));
        }
        let lengths: Vec<usize> = mats.iter().map(|m| m.rows()).collect();
        let mut values = Vec::with_capacity(lengths.iter().sum::<usize>() * d);
        for m in mats {
            values.extend_from_slice(m.data());
        }
        JaggedBatch::new(&lengths, values, d)
    }

    /// Number of sequences in the batch.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Length (row count) of sequence `i`.
    pub fn seq_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.seq_len(i)).collect()
    }

    /// Total rows across all sequences.
    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Zero-copy view of sequence `i` as `seq_len(i) * d` contiguous reals.
    pub fn seq(&self, i: usize) -> &[f64] {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        &self.values[lo * self.d..hi * self.d]
    }

    pub fn seq_mut(&mut self, i: usize) -> &mut [f64] {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        &mut self.values[lo * self.d..hi * self.d]
    }

    /// Copies sequence `i` into a dense `L_i × d` matrix.
    pub fn seq_mat(&self, i: usize) -> Mat {
        Mat::from_vec(self.seq_len(i), self.d, self.seq(i).to_vec())
            .expect("offsets guarantee the slice length")
    }

    /// Keeps only the latest (last) `min(L_i, keep)` rows of every sequence.
    ///
    /// Sequences already at or below `keep` are copied unchanged, so the op
    /// is idempotent and composes as `min`: slicing to `a` then `b` equals
    /// slicing to `min(a, b)`.
    pub fn slice_latest(&self, keep: usize) -> JaggedBatch {
        let lengths: Vec<usize> = (0..self.len()).map(|i| self.seq_len(i).min(keep)).collect();
        let mut values = Vec::with_capacity(lengths.iter().sum::<usize>() * self.d);
        for i in 0..self.len() {
            let l = self.seq_len(i);
            let kept = l.min(keep);
            let seq = self.seq(i);
            values.extend_from_slice(&seq[(l - kept) * self.d..]);
        }
        let out = JaggedBatch { values, offsets: prefix_sums(&lengths), d: self.d };
        out.check_invariants();
        out
    }

    /// Decomposes into `(lengths, flat values)`; inverse of [`JaggedBatch::new`].
    pub fn split(self) -> (Vec<usize>, Vec<f64>) {
        let lengths = self.lengths();
        (lengths, self.values)
    }

    /// The structural invariant: offsets are a monotone prefix-sum chain
    /// starting at 0, and the value buffer holds exactly `total_len * d`
    /// reals. Checked after every construction in debug builds.
    fn check_invariants(&self) {
        debug_assert!(!self.offsets.is_empty() && self.offsets[0] == 0);
        debug_assert!(self.offsets.windows(2).all(|w| w[0] <= w[1]));
        debug_assert_eq!(self.values.len(), self.total_len() * self.d);
    }
}

fn prefix_sums(lengths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    let mut acc = 0usize;
    offsets.push(0);
    for &l in lengths {
        acc += l;
        offsets.push(acc);
    }
    offsets
}

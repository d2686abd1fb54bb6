//! Sequence-length sampling and the load-balanced scheduler built on it.
//!
//! Training cost grows superlinearly in sequence length, so long user
//! histories are subsampled. The standard scheme caps every sequence the
//! same way: a target length (either a global cap or the per-user power rule
//! `round(n^(alpha/2))`), a uniform order-preserving subset of the history,
//! and the candidate suffix always kept intact.
//!
//! The load-balanced variant spends a per-rank compute budget on keeping
//! some sequences unsampled. Each rank tracks a work proxy: the sum over its
//! users of `min(n, cap)^gamma`, the cost plain capping would pay. A warmup
//! phase runs the standard cap while accumulating the proxy; the budget is
//! then its per-step average across ranks, and is re-estimated on a fixed
//! cadence afterwards. In the steady
//! state each rank draws a weighted random permutation of its users (weight
//! `min(1, cap/n)^(2-alpha)`, so longer histories are proposed less often)
//! and greedily admits users to run unsampled while the rank's floor work
//! plus admitted excess stays within the budget.
//!
//! Every random choice comes from a stream keyed by (seed, rank, step), so
//! scheduling is reproducible and independent of rank execution order.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-user target length under the power rule: `min(n, round(n^(alpha/2)))`.
pub fn sl_target_len(n: usize, alpha: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let t = (n as f64).powf(alpha / 2.0).round() as usize;
    t.min(n)
}

/// Uniform order-preserving subset: keeps `keep` of `n` positions, always
/// including the `n_candidates`-long suffix, sampling the rest of the
/// history without replacement. Returns ascending indices.
pub fn standard_sl_indices(
    n: usize,
    keep: usize,
    n_candidates: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if n_candidates > n {
        return Err(Error::Config(format!("candidate suffix {n_candidates} longer than {n}")));
    }
    let keep = keep.clamp(n_candidates, n);
    let history = n - n_candidates;
    let take = keep - n_candidates;
    let mut kept = floyd_sample(history, take, rng);
    kept.sort_unstable();
    kept.extend(history..n);
    Ok(kept)
}

/// Floyd's algorithm: a uniform `k`-subset of `0..m` in O(k) expected time.
fn floyd_sample(m: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(k <= m);
    let mut chosen = std::collections::HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    for j in (m - k)..m {
        let t = rng.random_range(0..=j);
        if chosen.insert(t) {
            out.push(t);
        } else {
            chosen.insert(j);
            out.push(j);
        }
    }
    out
}

/// Work proxy for one rank's batch: sum of `len^gamma`.
pub fn rank_load(lengths: &[usize], gamma: f64) -> f64 {
    lengths.iter().map(|&n| (n as f64).powf(gamma)).sum()
}

/// Max/min ratio across per-rank loads. Errors on empty input or a
/// non-positive minimum.
pub fn balance_ratio(loads: &[f64]) -> Result<f64> {
    if loads.is_empty() {
        return Err(Error::Domain("no rank loads".into()));
    }
    let max = loads.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = loads.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(Error::Domain(format!("non-positive rank load {min}")));
    }
    Ok(max / min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbslConfig {
    /// Global cap applied to every sampled sequence.
    pub ell_sl: usize,
    /// Length-distribution exponent used in admission weights.
    pub alpha: f64,
    /// Work-model exponent: cost of a length-n sequence scales as n^gamma.
    pub gamma: f64,
    /// Steps of plain capped sampling before the budget is first estimated.
    pub warmup_steps: usize,
    /// Budget re-estimation cadence after warmup.
    pub recal_period: usize,
    pub ranks: usize,
}

impl LbslConfig {
    fn validate(&self) -> Result<()> {
        if self.ell_sl == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup must run at least one step".into()));
        }
        if self.recal_period == 0 {
            return Err(Error::Config("recalibration period must be positive".into()));
        }
        if self.ranks == 0 {
            return Err(Error::Config("need at least one rank".into()));
        }
        if !(self.alpha.is_finite() && self.gamma.is_finite()) || self.gamma <= 0.0 {
            return Err(Error::Config("alpha and gamma must be finite, gamma positive".into()));
        }
        Ok(())
    }
}

/// What one rank should do with each user in its batch this step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankDecision {
    /// Kept length per user, aligned with the input batch order.
    pub kept_lens: Vec<usize>,
    /// True where the user runs at full length with no subsampling.
    pub unsampled: Vec<bool>,
}

impl RankDecision {
    /// Materializes kept indices for one user of this batch. `slot` is the
    /// user's position in the batch the decision was made for.
    pub fn indices_for(
        &self,
        slot: usize,
        n: usize,
        n_candidates: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let keep = *self
            .kept_lens
            .get(slot)
            .ok_or_else(|| Error::IndexOutOfRange(format!("slot {slot}")))?;
        if self.unsampled[slot] {
            return Ok((0..n).collect());
        }
        standard_sl_indices(n, keep, n_candidates, rng)
    }
}

/// Scheduler state shared across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbslState {
    cfg: LbslConfig,
    seed: u64,
    step: usize,
    /// Accumulated work proxy per rank since the last budget estimate.
    proxy: Vec<f64>,
    /// Per-step work budget; None until warmup completes.
    ell_bar: Option<f64>,
}

impl LbslState {
    pub fn new(cfg: LbslConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ranks = cfg.ranks;
        Ok(LbslState { cfg, seed, step: 0, proxy: vec![0.0; ranks], ell_bar: None })
    }

    pub fn config(&self) -> &LbslConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn budget(&self) -> Option<f64> {
        self.ell_bar
    }

    pub fn proxies(&self) -> &[f64] {
        &self.proxy
    }

    fn capped(&self, n: usize) -> usize {
        n.min(self.cfg.ell_sl)
    }

    fn floor_work(&self, lengths: &[usize]) -> f64 {
        lengths.iter().map(|&n| (self.capped(n) as f64).powf(self.cfg.gamma)).sum()
    }

    /// Advances one step. `batches[r]` holds the full sequence lengths rank
    /// `r` was assigned. Returns one decision per rank.
    pub fn step(&mut self, batches: &[Vec<usize>]) -> Result<Vec<RankDecision>> {
        if batches.len() != self.cfg.ranks {
            return Err(Error::Dimension(format!(
                "{} batches for {} ranks",
                batches.len(),
                self.cfg.ranks
            )));
        }
        self.step += 1;
        let t = self.step;
        let warm = t <= self.cfg.warmup_steps;
        let mut decisions = Vec::with_capacity(batches.len());
        for (r, lengths) in batches.iter().enumerate() {
            let decision = if warm {
                RankDecision {
                    kept_lens: lengths.iter().map(|&n| self.capped(n)).collect(),
                    unsampled: lengths.iter().map(|&n| n <= self.cfg.ell_sl).collect(),
                }
            } else {
                self.admit(r, t, lengths)
            };
            // Proxy tracks what plain capping would spend on the batch, so
            // the budget follows the length distribution instead of feeding
            // back its own admissions.
            self.proxy[r] += self.floor_work(lengths);
            decisions.push(decision);
        }
        if t == self.cfg.warmup_steps {
            let total: f64 = self.proxy.iter().sum();
            self.ell_bar = Some(total / (self.cfg.ranks * self.cfg.warmup_steps) as f64);
            self.proxy.iter_mut().for_each(|p| *p = 0.0);
        } else if t > self.cfg.warmup_steps
            && (t - self.cfg.warmup_steps) % self.cfg.recal_period == 0
        {
            let total: f64 = self.proxy.iter().sum();
            self.ell_bar = Some(total / (self.cfg.ranks * self.cfg.recal_period) as f64);
            self.proxy.iter_mut().for_each(|p| *p = 0.0);
        }
        Ok(decisions)
    }

    /// Steady-state admission for one rank: weighted random permutation,
    /// then greedy fill of the excess budget.
    fn admit(&self, rank: usize, t: usize, lengths: &[usize]) -> RankDecision {
        let budget = self.ell_bar.expect("admission runs only after warmup");
        let floor = self.floor_work(lengths);
        let mut kept_lens: Vec<usize> = lengths.iter().map(|&n| self.capped(n)).collect();
        let mut unsampled: Vec<bool> = lengths.iter().map(|&n| n <= self.cfg.ell_sl).collect();
        let mut r = rng::stream(self.seed, &[rank as u64, t as u64]);
        // Weighted permutation: sample a key per user, larger keys first.
        let mut order: Vec<(f64, usize)> = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let p = (self.cfg.ell_sl as f64 / n.max(1) as f64).min(1.0);
                let w = p.powf(2.0 - self.cfg.alpha);
                let u: f64 = r.random_range(f64::MIN_POSITIVE..1.0);
                (u.powf(1.0 / w), i)
            })
            .collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut spent = 0.0;
        for &(_, i) in &order {
            let n = lengths[i];
            if n <= self.cfg.ell_sl {
                continue;
            }
            let full = (n as f64).powf(self.cfg.gamma);
            let excess = full - (self.capped(n) as f64).powf(self.cfg.gamma);
            if floor + spent + excess <= budget {
                spent += excess;
                kept_lens[i] = n;
                unsampled[i] = true;
            }
        }
        RankDecision { kept_lens, unsampled }
    }
}

/// Shuffles user indices into per-rank batches of `per_rank` users each,
/// deterministically in (seed, step).
pub fn shard_users(
    n_users: usize,
    ranks: usize,
    per_rank: usize,
    seed: u64,
    step: usize,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_users).collect();
    let mut r = rng::stream(seed, &[0x5a4d, step as u64]);
    idx.shuffle(&mut r);
    (0..ranks)
        .map(|k| idx.iter().skip(k * per_rank).take(per_rank).cloned().collect())
        .collect()
}

//! Synthetic interaction streams with a planted, exactly analyzable label
//! rule.
//!
//! Items fall into `classes` buckets (`item % classes`); every history event
//! carries its bucket as an action. Each candidate's labels depend only on
//! how many of the user's most recent `window` history events share the
//! candidate's bucket:
//!
//! * task 0 fires when no recent event matches,
//! * task 1 fires when at most one matches.
//!
//! With uniform items both positive rates sit inside the (0.02, 0.5) band
//! the trainer expects, and the zero-noise Bayes floor is computable in
//! closed form, which is what makes desk-scale learnability tests possible.

use anyhow::{bail, Context};
use hstu_core::dataset::{record_to_example, Example, Record};
use hstu_core::metrics::PRED_CLAMP;
use hstu_core::rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

pub const TASKS: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    #[serde(default)]
    pub lengths: LengthDist,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_item_vocab")]
    pub item_vocab: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Probability that each emitted label is flipped.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthDist {
    Uniform { min: usize, max: usize },
    Pareto { shape: f64, min: usize, cap: usize },
}

impl Default for LengthDist {
    fn default() -> Self {
        LengthDist::Uniform { min: 8, max: 32 }
    }
}

impl LengthDist {
    pub fn min_len(&self) -> usize {
        match *self {
            LengthDist::Uniform { min, .. } => min,
            LengthDist::Pareto { min, .. } => min,
        }
    }

    fn sample(&self, r: &mut ChaCha8Rng) -> usize {
        match *self {
            LengthDist::Uniform { min, max } => r.random_range(min..=max),
            LengthDist::Pareto { shape, min, cap } => {
                let p = Pareto::new(min as f64, shape).expect("validated spec");
                (p.sample(r) as usize).clamp(min, cap)
            }
        }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 256,
            lengths: LengthDist::default(),
            n_candidates: default_candidates(),
            item_vocab: default_item_vocab(),
            classes: default_classes(),
            window: default_window(),
            noise: 0.0,
            seed: default_seed(),
        }
    }
}

fn default_candidates() -> usize {
    4
}
fn default_item_vocab() -> usize {
    64
}
fn default_classes() -> usize {
    4
}
fn default_window() -> usize {
    8
}
fn default_seed() -> u64 {
    7
}

impl SyntheticSpec {
    /// Action ids are the class buckets.
    pub fn action_vocab(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.users == 0 || self.n_candidates == 0 {
            bail!("need at least one user and one candidate");
        }
        if self.classes < 2 || self.item_vocab < self.classes {
            bail!("need >= 2 classes, each represented in the item vocabulary");
        }
        if self.window == 0 {
            bail!("window must be positive");
        }
        if !(0.0..0.5).contains(&self.noise) {
            bail!("noise must lie in [0, 0.5)");
        }
        match self.lengths {
            LengthDist::Uniform { min, max } => {
                if min > max {
                    bail!("uniform length range is empty");
                }
            }
            LengthDist::Pareto { shape, min, cap } => {
                if !(shape.is_finite() && shape > 0.0) || min == 0 || cap < min {
                    bail!("pareto lengths need positive shape and 0 < min <= cap");
                }
            }
        }
        if self.lengths.min_len() < self.window {
            bail!(
                "shortest history {} is below the label window {}; rates would drift",
                self.lengths.min_len(),
                self.window
            );
        }
        for (task, p) in self.rates().into_iter().enumerate() {
            if !(0.02..0.5).contains(&p) {
                bail!("task {task} positive rate {p:.4} outside (0.02, 0.5)");
            }
        }
        Ok(())
    }

    /// Analytic positive rate per task, noise included.
    pub fn rates(&self) -> [f64; TASKS] {
        let q = 1.0 - 1.0 / self.classes as f64;
        let w = self.window as f64;
        let p0 = q.powf(w);
        let p1 = p0 + w * (1.0 - q) * q.powf(w - 1.0);
        [flip(p0, self.noise), flip(p1, self.noise)]
    }

    /// NE of the Bayes-optimal predictor per task, with the same prediction
    /// clamp the metric applies. Zero noise gives a floor that is tiny but
    /// not exactly zero because of the clamp.
    pub fn bayes_floor(&self) -> [f64; TASKS] {
        let eps = self.noise;
        let opt_bce = -((1.0 - eps) * (1.0 - eps.max(PRED_CLAMP)).ln()
            + eps * eps.max(PRED_CLAMP).ln());
        let mut out = [0.0; TASKS];
        for (task, p) in self.rates().into_iter().enumerate() {
            out[task] = opt_bce / entropy(p);
        }
        out
    }
}

fn flip(p: f64, eps: f64) -> f64 {
    p * (1.0 - 2.0 * eps) + eps
}

fn entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

pub fn class_of(item: u32, classes: usize) -> u32 {
    item % classes as u32
}

/// The planted feature: matches of the candidate's class among the last
/// `window` history events.
pub fn match_count(history: &[u32], candidate: u32, classes: usize, window: usize) -> usize {
    let start = history.len().saturating_sub(window);
    history[start..]
        .iter()
        .filter(|&&it| class_of(it, classes) == class_of(candidate, classes))
        .count()
}

pub fn labels_for(count: usize) -> [u8; TASKS] {
    [(count == 0) as u8, (count <= 1) as u8]
}

pub fn generate(spec: &SyntheticSpec) -> anyhow::Result<Vec<Example>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut r = rng::stream(spec.seed, &[0x5e9d, u as u64]);
        let n_hist = spec.lengths.sample(&mut r);
        let mut items: Vec<u32> =
            (0..n_hist).map(|_| r.random_range(0..spec.item_vocab as u32)).collect();
        let mut actions: Vec<Vec<u32>> =
            items.iter().map(|&it| vec![class_of(it, spec.classes)]).collect();
        let history = items.clone();

        let mut labels = vec![Vec::with_capacity(spec.n_candidates); TASKS];
        for _ in 0..spec.n_candidates {
            let cand = r.random_range(0..spec.item_vocab as u32);
            items.push(cand);
            actions.push(Vec::new());
            let mut y = labels_for(match_count(&history, cand, spec.classes, spec.window));
            for bit in y.iter_mut() {
                if spec.noise > 0.0 && r.random::<f64>() < spec.noise {
                    *bit ^= 1;
                }
            }
            for (task, row) in labels.iter_mut().enumerate() {
                row.push(y[task]);
            }
        }

        let n = items.len();
        let rec = Record {
            user_id: u as u64,
            items,
            actions,
            timestamps: (0..n as i64).collect(),
            candidates: spec.n_candidates,
            labels,
        };
        out.push(record_to_example(rec).with_context(|| format!("user {u}"))?);
    }
    Ok(out)
}

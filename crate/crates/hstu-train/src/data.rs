//! Example loading, the chronological train/eval split, and per-tower
//! event filtering.

use anyhow::Context;
use hstu_core::dataset::{read_jsonl, Example};
use hstu_core::input::EventSequence;
use hstu_core::model::EventSource;
use std::path::Path;

use crate::config::{DataSection, DataSource};
use crate::kuairand::{ingest_csv, CsvSchema};
use crate::synth;

pub fn load_examples(data: &DataSection) -> anyhow::Result<Vec<Example>> {
    let mut examples = match &data.source {
        DataSource::Synthetic(spec) => synth::generate(spec)?,
        DataSource::Jsonl { path } => {
            read_jsonl(Path::new(path)).with_context(|| format!("loading {path}"))?
        }
        DataSource::Csv { path } => {
            ingest_csv(Path::new(path), &CsvSchema::default(), 1, 256, 0.01)?.examples
        }
    };
    if let Some(l_max) = data.l_max {
        for ex in examples.iter_mut() {
            *ex = cap_length(ex, l_max)?;
        }
    }
    Ok(examples)
}

/// Keeps the latest `l_max` events. Candidates sit at the tail, so they
/// always survive; the cap never drops below the candidate count.
pub fn cap_length(ex: &Example, l_max: usize) -> anyhow::Result<Example> {
    let n = ex.seq.len();
    let keep = l_max.max(ex.seq.n_candidates).min(n);
    if keep == n {
        return Ok(ex.clone());
    }
    let idx: Vec<usize> = (n - keep..n).collect();
    Ok(Example { seq: ex.seq.select(&idx)?, labels: ex.labels.clone() })
}

/// Orders by each user's final timestamp and holds out the latest
/// `fraction` as evaluation data, so evaluation is strictly later than
/// training. Ties break on user id to keep the split reproducible.
pub fn chronological_split(
    mut examples: Vec<Example>,
    fraction: f64,
) -> (Vec<Example>, Vec<Example>) {
    examples.sort_by_key(|ex| (ex.seq.timestamps.last().copied().unwrap_or(0), ex.seq.user_id));
    let n = examples.len();
    if fraction <= 0.0 || n < 2 {
        return (examples, Vec::new());
    }
    let n_eval = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let eval = examples.split_off(n - n_eval);
    (examples, eval)
}

/// What one tower sees: either everything, or only history events carrying
/// one action id. Candidates are always included.
pub fn filter_for_tower(
    seq: &EventSequence,
    source: EventSource,
) -> hstu_core::Result<EventSequence> {
    match source {
        EventSource::All => Ok(seq.clone()),
        EventSource::Action(a) => {
            let idx: Vec<usize> = (0..seq.len())
                .filter(|&i| seq.is_candidate(i) || seq.action_sets[i].contains(&a))
                .collect();
            seq.select(&idx)
        }
    }
}

/// One filtered sequence per tower, in tower order.
pub fn tower_views(
    seq: &EventSequence,
    sources: &[EventSource],
) -> hstu_core::Result<Vec<EventSequence>> {
    sources.iter().map(|&s| filter_for_tower(seq, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use hstu_core::mat::Mat;

    fn example(user: u64, ts: Vec<i64>, n_cand: usize) -> Example {
        let n = ts.len();
        let seq = EventSequence::new(
            user,
            (0..n as u32).collect(),
            (0..n).map(|i| vec![(i % 3) as u32]).collect(),
            ts,
            n_cand,
        )
        .unwrap();
        Example { seq, labels: Mat::zeros(n_cand, 1) }
    }

    #[test]
    fn split_is_chronological_and_exhaustive() {
        let exs = vec![
            example(0, vec![5, 9], 1),
            example(1, vec![1, 2], 1),
            example(2, vec![3, 30], 1),
            example(3, vec![0, 4], 1),
            example(4, vec![2, 11], 1),
        ];
        let (train, eval) = chronological_split(exs, 0.4);
        assert_eq!(train.len(), 3);
        assert_eq!(eval.len(), 2);
        let last_train = train.iter().map(|e| *e.seq.timestamps.last().unwrap()).max().unwrap();
        let first_eval = eval.iter().map(|e| *e.seq.timestamps.last().unwrap()).min().unwrap();
        assert!(first_eval >= last_train);
        assert_eq!(eval[1].seq.user_id, 2);
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let exs = vec![example(0, vec![1, 2], 1), example(1, vec![0, 3], 1)];
        let (train, eval) = chronological_split(exs, 0.0);
        assert_eq!(train.len(), 2);
        assert!(eval.is_empty());
    }

    #[test]
    fn action_filter_keeps_candidates_and_matching_history() {
        let ex = example(7, (0..10).collect(), 2);
        let filtered = filter_for_tower(&ex.seq, EventSource::Action(1)).unwrap();
        // History actions cycle 0,1,2: positions 1,4,7 carry action 1; the
        // two candidates (8, 9) always survive.
        assert_eq!(filtered.item_ids, vec![1, 4, 7, 8, 9]);
        assert_eq!(filtered.n_candidates, 2);
        let all = filter_for_tower(&ex.seq, EventSource::All).unwrap();
        assert_eq!(all, ex.seq);
    }

    #[test]
    fn filter_can_empty_the_history() {
        let ex = example(7, (0..6).collect(), 2);
        let filtered = filter_for_tower(&ex.seq, EventSource::Action(9)).unwrap();
        assert_eq!(filtered.len(), 2);
        assert_eq!(filtered.history_len(), 0);
    }

    #[test]
    fn cap_keeps_latest_and_candidates() {
        let ex = example(3, (0..12).collect(), 2);
        let capped = cap_length(&ex, 5).unwrap();
        assert_eq!(capped.seq.item_ids, vec![7, 8, 9, 10, 11]);
        assert_eq!(capped.seq.n_candidates, 2);
        let tiny = cap_length(&ex, 1).unwrap();
        assert_eq!(tiny.seq.len(), 2);
        let untouched = cap_length(&ex, 40).unwrap();
        assert_eq!(untouched.seq, ex.seq);
    }
}

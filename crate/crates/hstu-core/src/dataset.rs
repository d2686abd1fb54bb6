//! On-disk examples: one JSON object per line.
//!
//! A record is a full event sequence plus per-task labels for its candidate
//! suffix:
//!
//! ```json
//! {"user_id":7,"items":[3,4,9],"actions":[[0],[1,2],[]],
//!  "timestamps":[10,20,30],"candidates":1,"labels":[[1]]}
//! ```
//!
//! `labels[t][c]` is the 0/1 label of candidate `c` under task `t`. Parse
//! errors carry one-based line numbers.

use crate::error::{Error, Result};
use crate::input::EventSequence;
use crate::mat::Mat;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub user_id: u64,
    pub items: Vec<u32>,
    pub actions: Vec<Vec<u32>>,
    pub timestamps: Vec<i64>,
    pub candidates: usize,
    /// `labels[task][candidate]`, each 0 or 1.
    pub labels: Vec<Vec<u8>>,
}

/// An in-memory training example: the sequence and a `candidates × tasks`
/// label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: EventSequence,
    pub labels: Mat,
}

impl Example {
    pub fn tasks(&self) -> usize {
        self.labels.cols()
    }
}

pub fn record_to_example(rec: Record) -> Result<Example> {
    let seq =
        EventSequence::new(rec.user_id, rec.items, rec.actions, rec.timestamps, rec.candidates)?;
    let tasks = rec.labels.len();
    if tasks == 0 {
        return Err(Error::Format("record has no label rows".into()));
    }
    let mut labels = Mat::zeros(rec.candidates, tasks);
    for (t, row) in rec.labels.iter().enumerate() {
        if row.len() != rec.candidates {
            return Err(Error::Format(format!(
                "task {t} has {} labels for {} candidates",
                row.len(),
                rec.candidates
            )));
        }
        for (c, &y) in row.iter().enumerate() {
            if y > 1 {
                return Err(Error::Format(format!("label {y} is not 0/1")));
            }
            labels.set(c, t, y as f64);
        }
    }
    Ok(Example { seq, labels })
}

pub fn example_to_record(ex: &Example) -> Record {
    let c = ex.seq.n_candidates;
    let tasks = ex.labels.cols();
    let mut labels = vec![vec![0u8; c]; tasks];
    for t in 0..tasks {
        for cand in 0..c {
            labels[t][cand] = ex.labels.get(cand, t) as u8;
        }
    }
    Record {
        user_id: ex.seq.user_id,
        items: ex.seq.item_ids.clone(),
        actions: ex.seq.action_sets.clone(),
        timestamps: ex.seq.timestamps.clone(),
        candidates: c,
        labels,
    }
}

/// Reads every example from a JSONL file. All records must agree on the
/// task count.
pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut tasks: Option<usize> = None;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let ex = record_to_example(rec).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        match tasks {
            None => tasks = Some(ex.tasks()),
            Some(t) if t != ex.tasks() => {
                return Err(Error::Format(format!(
                    "line {}: {} tasks, earlier records had {t}",
                    i + 1,
                    ex.tasks()
                )))
            }
            _ => {}
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let line = serde_json::to_string(&example_to_record(ex))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

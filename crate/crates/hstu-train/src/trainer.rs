//! The simulated-rank training loop: stochastic-length scheduling, parallel
//! per-rank forward/backward with a deterministic gradient reduction, a
//! serialized optimizer step, periodic evaluation, and run artifacts
//! (metrics CSV, resolved config, checkpoint).
//!
//! Runs are deterministic for a given seed and rank count: every random
//! choice draws from a tagged stream, so executing ranks serially or in
//! parallel produces identical metrics.

use anyhow::{anyhow, bail, Context};
use hstu_core::checkpoint;
use hstu_core::dataset::Example;
use hstu_core::layer::CacheMode;
use hstu_core::mat::Mat;
use hstu_core::metrics::FlopMode;
use hstu_core::model::{flops_model, EventSource, Hstu, ModelConfig};
use hstu_core::par;
use hstu_core::rng;
use hstu_core::sampling::{balance_ratio, rank_load, sl_target_len, standard_sl_indices, LbslState};
use hstu_core::Execution;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{SlMode, TrainConfig};
use crate::data;
use crate::optim::{add_grads, scale_grads, Adam, AdamParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task: usize,
    pub split: &'static str,
    pub ne: f64,
    pub train_flop: f64,
    pub infer_flop: f64,
    pub balance_ratio: f64,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub steps_run: usize,
    pub model: Hstu,
    pub metrics: Vec<MetricsRow>,
    /// Last reported eval NE per task.
    pub final_eval: Vec<(usize, f64)>,
    pub train_flops: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EvalReport {
    pub ne: Vec<(usize, f64)>,
    pub inference_flops: f64,
}

struct UserStep {
    loss: f64,
    grads: Hstu,
    probs: Mat,
    labels: Mat,
    flops: f64,
}

pub fn train(
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    exec: Execution,
) -> anyhow::Result<RunArtifacts> {
    cfg.validate()?;
    let examples = data::load_examples(&cfg.data)?;
    let (train_set, eval_set) = data::chronological_split(examples, cfg.eval.split_fraction);
    if train_set.is_empty() {
        bail!("no training examples");
    }
    for ex in train_set.iter().chain(eval_set.iter()) {
        if ex.tasks() != cfg.model.tasks {
            bail!("example for user {} has {} tasks, model expects {}", ex.seq.user_id, ex.tasks(), cfg.model.tasks);
        }
    }
    let sources: Vec<EventSource> = cfg.model.towers.iter().map(|t| t.source).collect();
    let seed = cfg.optim.seed;
    let mut model = Hstu::init(cfg.model.clone(), seed)?;
    let mut opt = Adam::new(
        &model,
        AdamParams {
            lr: cfg.optim.lr,
            beta1: cfg.optim.beta1,
            beta2: cfg.optim.beta2,
            eps: cfg.optim.eps,
        },
    );
    let mut lbsl = cfg.sl.lbsl_config().map(|c| LbslState::new(c, seed)).transpose()?;
    let ranks = if cfg.sl.enabled { cfg.sl.ranks } else { 1 };
    let b = cfg.data.batch_size;
    let per_step = ranks * b;
    let cache_mode = cfg.optim.cache.mode();
    let eval_tasks = cfg.eval_tasks();

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut train_flops = 0.0f64;
    let mut infer_flops = 0.0f64;
    let mut window: PredPool = PredPool::empty(cfg.model.tasks);
    let mut balance_acc = 0.0f64;
    let mut balance_n = 0usize;
    let mut final_eval: Vec<(usize, f64)> = Vec::new();
    let mut steps_run = 0usize;

    for step in 0..cfg.data.steps {
        steps_run = step + 1;
        let mut batch: Vec<usize> = Vec::with_capacity(per_step);
        while batch.len() < per_step {
            if cursor >= order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng::stream(seed, &[0xe70c, epoch]));
                epoch += 1;
                cursor = 0;
            }
            let take = (per_step - batch.len()).min(order.len() - cursor);
            batch.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }

        let (kept, loads) = schedule(cfg, &mut lbsl, &train_set, &batch, ranks, step)
            .with_context(|| format!("step {step}: length scheduling"))?;
        balance_acc += balance_ratio(&loads)?;
        balance_n += 1;

        let sel_seed = rng::stream(seed, &[0xd5e1, step as u64]).random::<u64>();
        let results = par::try_map_indexed(exec, per_step, |i| -> hstu_core::Result<UserStep> {
            let (rank, slot) = (i / b, i % b);
            let ex = &train_set[batch[i]];
            let seq = match &kept[rank][slot] {
                Some(idx) => ex.seq.select(idx)?,
                None => ex.seq.clone(),
            };
            let views = data::tower_views(&seq, &sources)?;
            let lens: Vec<usize> = views.iter().map(|v| v.len()).collect();
            let (probs, cache) = model.forward(&views, cache_mode, sel_seed)?;
            let (loss, grads) = model.backward(&cache, &views, &ex.labels)?;
            let flops = flops_model(&model.cfg, &lens, FlopMode::Training)?;
            Ok(UserStep { loss, grads, probs, labels: ex.labels.clone(), flops })
        })
        .map_err(|e| {
            let users: Vec<u64> = batch.iter().map(|&i| train_set[i].seq.user_id).collect();
            anyhow!("aborting at step {step}: {e}; batch users {users:?}")
        })?;

        let mut acc = model.zeros_like();
        for (i, r) in results.iter().enumerate() {
            if !r.loss.is_finite() {
                let user = train_set[batch[i]].seq.user_id;
                bail!("aborting at step {step}: non-finite loss for user {user}");
            }
            add_grads(&mut acc, &r.grads);
            train_flops += r.flops;
            window.push(&r.probs, &r.labels);
        }
        scale_grads(&mut acc, 1.0 / per_step as f64);
        opt.step(&mut model, &acc).with_context(|| format!("optimizer step {step}"))?;

        let at_end = step + 1 == cfg.data.steps;
        if (step + 1) % cfg.eval.eval_every == 0 || at_end {
            let balance = if balance_n > 0 { balance_acc / balance_n as f64 } else { 1.0 };
            for &t in &eval_tasks {
                if let Some(ne) = window.ne(t)? {
                    rows.push(MetricsRow {
                        step: step + 1,
                        task: t,
                        split: "train",
                        ne,
                        train_flop: train_flops,
                        infer_flop: infer_flops,
                        balance_ratio: balance,
                    });
                }
            }
            if !eval_set.is_empty() {
                let pool = collect_preds(&model, &eval_set, exec, seed)?;
                infer_flops += pool.flops;
                final_eval.clear();
                for &t in &eval_tasks {
                    if let Some(ne) = pool.ne(t)? {
                        final_eval.push((t, ne));
                        rows.push(MetricsRow {
                            step: step + 1,
                            task: t,
                            split: "eval",
                            ne,
                            train_flop: train_flops,
                            infer_flop: infer_flops,
                            balance_ratio: balance,
                        });
                    }
                }
            }
            window = PredPool::empty(cfg.model.tasks);
            balance_acc = 0.0;
            balance_n = 0;
            if let Some(bar) = cfg.eval.stop_ne {
                if !final_eval.is_empty() {
                    let mean =
                        final_eval.iter().map(|(_, ne)| ne).sum::<f64>() / final_eval.len() as f64;
                    if mean < bar {
                        break;
                    }
                }
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => Some(write_artifacts(dir, cfg, &model, &rows, steps_run)?),
        None => None,
    };
    Ok(RunArtifacts { steps_run, model, metrics: rows, final_eval, train_flops, checkpoint })
}

/// Kept-index lists per (rank, slot), where `None` means full length, plus
/// the realized per-rank loads.
#[allow(clippy::type_complexity)]
fn schedule(
    cfg: &TrainConfig,
    lbsl: &mut Option<LbslState>,
    train_set: &[Example],
    batch: &[usize],
    ranks: usize,
    step: usize,
) -> anyhow::Result<(Vec<Vec<Option<Vec<usize>>>>, Vec<f64>)> {
    let b = cfg.data.batch_size;
    let seed = cfg.optim.seed;
    let mut kept: Vec<Vec<Option<Vec<usize>>>> = Vec::with_capacity(ranks);
    let mut loads: Vec<f64> = Vec::with_capacity(ranks);
    let gamma = cfg.sl.gamma;
    let rank_batches: Vec<&[usize]> = batch.chunks(b).collect();

    if !cfg.sl.enabled {
        for rb in &rank_batches {
            let lens: Vec<usize> = rb.iter().map(|&i| train_set[i].seq.len()).collect();
            loads.push(rank_load(&lens, gamma));
            kept.push(vec![None; rb.len()]);
        }
        return Ok((kept, loads));
    }

    match cfg.sl.mode {
        SlMode::Lbsl => {
            let state = lbsl.as_mut().expect("validated configuration");
            let rank_lens: Vec<Vec<usize>> = rank_batches
                .iter()
                .map(|rb| rb.iter().map(|&i| train_set[i].seq.len()).collect())
                .collect();
            let decisions = state.step(&rank_lens)?;
            for (r, dec) in decisions.iter().enumerate() {
                let mut per_rank = Vec::with_capacity(b);
                for (slot, &i) in rank_batches[r].iter().enumerate() {
                    let ex = &train_set[i];
                    if dec.unsampled[slot] && dec.kept_lens[slot] == ex.seq.len() {
                        per_rank.push(None);
                    } else {
                        let mut rr =
                            rng::stream(seed, &[0x51ee, step as u64, r as u64, slot as u64]);
                        per_rank.push(Some(dec.indices_for(
                            slot,
                            ex.seq.len(),
                            ex.seq.n_candidates,
                            &mut rr,
                        )?));
                    }
                }
                loads.push(rank_load(&dec.kept_lens, gamma));
                kept.push(per_rank);
            }
        }
        SlMode::Standard => {
            for (r, rb) in rank_batches.iter().enumerate() {
                let mut per_rank = Vec::with_capacity(b);
                let mut lens = Vec::with_capacity(b);
                for (slot, &i) in rb.iter().enumerate() {
                    let ex = &train_set[i];
                    let n = ex.seq.len();
                    let mut target = sl_target_len(n, cfg.sl.alpha);
                    if let Some(cap) = cfg.sl.ell_sl {
                        target = target.min(cap);
                    }
                    let target = target.clamp(ex.seq.n_candidates, n);
                    if target >= n {
                        per_rank.push(None);
                        lens.push(n);
                    } else {
                        let mut rr =
                            rng::stream(seed, &[0x51ee, step as u64, r as u64, slot as u64]);
                        per_rank.push(Some(standard_sl_indices(
                            n,
                            target,
                            ex.seq.n_candidates,
                            &mut rr,
                        )?));
                        lens.push(target);
                    }
                }
                loads.push(rank_load(&lens, gamma));
                kept.push(per_rank);
            }
        }
    }
    Ok((kept, loads))
}

/// Pooled candidate predictions and labels, per task.
pub struct PredPool {
    preds: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
    pub flops: f64,
}

impl PredPool {
    fn empty(tasks: usize) -> PredPool {
        PredPool { preds: vec![Vec::new(); tasks], labels: vec![Vec::new(); tasks], flops: 0.0 }
    }

    fn push(&mut self, probs: &Mat, labels: &Mat) {
        for t in 0..self.preds.len() {
            for c in 0..probs.rows() {
                self.preds[t].push(probs.get(c, t));
                self.labels[t].push(labels.get(c, t));
            }
        }
    }

    /// NE for one task; `None` when the pooled labels are single-class and
    /// the metric is undefined.
    pub fn ne(&self, task: usize) -> anyhow::Result<Option<f64>> {
        let labels = &self.labels[task];
        if labels.is_empty() {
            return Ok(None);
        }
        let first = labels[0];
        if labels.iter().all(|&y| y == first) {
            return Ok(None);
        }
        Ok(Some(hstu_core::metrics::normalized_entropy(&self.preds[task], labels)?))
    }
}

/// Full-length forward over a dataset; used by evaluation (inference never
/// subsamples).
pub fn collect_preds(
    model: &Hstu,
    examples: &[Example],
    exec: Execution,
    selection_seed: u64,
) -> anyhow::Result<PredPool> {
    let sources: Vec<EventSource> = model.cfg.towers.iter().map(|t| t.source).collect();
    let per = par::try_map_indexed(exec, examples.len(), |i| -> hstu_core::Result<(Mat, f64)> {
        let views = data::tower_views(&examples[i].seq, &sources)?;
        let lens: Vec<usize> = views.iter().map(|v| v.len()).collect();
        let (probs, _) = model.forward(&views, CacheMode::Minimal, selection_seed)?;
        let flops = flops_model(&model.cfg, &lens, FlopMode::Inference)?;
        Ok((probs, flops))
    })?;
    let mut pool = PredPool::empty(model.cfg.tasks);
    for (i, (probs, flops)) in per.iter().enumerate() {
        pool.push(probs, &examples[i].labels);
        pool.flops += flops;
    }
    Ok(pool)
}

pub fn evaluate(
    model: &Hstu,
    examples: &[Example],
    tasks: &[usize],
    exec: Execution,
    selection_seed: u64,
) -> anyhow::Result<EvalReport> {
    if examples.is_empty() {
        bail!("nothing to evaluate");
    }
    for ex in examples {
        if ex.tasks() != model.cfg.tasks {
            bail!(
                "task mismatch: example for user {} has {} tasks, model expects {}",
                ex.seq.user_id,
                ex.tasks(),
                model.cfg.tasks
            );
        }
    }
    let pool = collect_preds(model, examples, exec, selection_seed)?;
    let mut ne = Vec::with_capacity(tasks.len());
    for &t in tasks {
        match pool.ne(t)? {
            Some(v) => ne.push((t, v)),
            None => bail!("task {t}: evaluation labels are single-class, NE is undefined"),
        }
    }
    Ok(EvalReport { ne, inference_flops: pool.flops })
}

/// Restores a checkpoint into a freshly shaped model.
pub fn load_model(cfg: &ModelConfig, path: &Path) -> anyhow::Result<Hstu> {
    let ckpt = checkpoint::load(path)?;
    let mut model = Hstu::init(cfg.clone(), 0)?;
    checkpoint::restore_into(&ckpt, model.tensors_mut())?;
    Ok(model)
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "task", "split", "ne", "train_flop", "infer_flop", "balance_ratio"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.task.to_string(),
            r.split.to_string(),
            r.ne.to_string(),
            r.train_flop.to_string(),
            r.infer_flop.to_string(),
            r.balance_ratio.to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn write_artifacts(
    dir: &Path,
    cfg: &TrainConfig,
    model: &Hstu,
    rows: &[MetricsRow],
    steps_run: usize,
) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    std::fs::write(dir.join("metrics.csv"), metrics_to_csv(rows)?)?;
    let mut meta = BTreeMap::new();
    meta.insert("steps_run".to_string(), steps_run.to_string());
    meta.insert("seed".to_string(), cfg.optim.seed.to_string());
    meta.insert("tasks".to_string(), cfg.model.tasks.to_string());
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &model.tensors(), &meta)?;
    Ok(path)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CacheChoice, DataSection, DataSource};
    use crate::synth::{LengthDist, SyntheticSpec};
    use hstu_core::attention::MaskSpec;
    use hstu_core::input::EventSequence;
    use hstu_core::model::{StageConfig, TowerConfig};

    fn tiny_config(steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 8,
                heads: 2,
                item_vocab: 16,
                action_vocab: 4,
                tasks: 2,
                attn_normalize: true,
                fp8: false,
                towers: vec![TowerConfig {
                    source: EventSource::All,
                    stages: vec![StageConfig {
                        layers: 1,
                        mask: MaskSpec::semi_local(8, 4, Default::default()),
                        truncate: None,
                    }],
                }],
            },
            data: DataSection {
                source: DataSource::Synthetic(SyntheticSpec {
                    users: 24,
                    lengths: LengthDist::Uniform { min: 8, max: 14 },
                    n_candidates: 3,
                    item_vocab: 16,
                    ..SyntheticSpec::default()
                }),
                l_max: None,
                batch_size: 4,
                steps,
            },
            sl: Default::default(),
            optim: Default::default(),
            eval: crate::config::EvalSection {
                split_fraction: 0.25,
                eval_every: 2,
                stop_ne: None,
                tasks: Vec::new(),
            },
        }
    }

    #[test]
    fn zero_lr_keeps_parameters_bitwise() {
        let mut cfg = tiny_config(3);
        cfg.optim.lr = 0.0;
        let got = train(&cfg, None, Execution::Sequential).unwrap();
        let init = Hstu::init(cfg.model.clone(), cfg.optim.seed).unwrap();
        assert_eq!(got.model, init);
        assert_eq!(got.steps_run, 3);
    }

    #[test]
    fn sequential_and_parallel_runs_are_identical() {
        let cfg = tiny_config(4);
        let a = train(&cfg, None, Execution::Sequential).unwrap();
        let b = train(&cfg, None, Execution::Parallel).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert_eq!(a.train_flops, b.train_flops);
    }

    #[test]
    fn remat_and_full_cache_produce_the_same_run() {
        let mut full = tiny_config(4);
        full.optim.cache = CacheChoice::Full;
        let mut min = tiny_config(4);
        min.optim.cache = CacheChoice::Minimal;
        let a = train(&full, None, Execution::Sequential).unwrap();
        let b = train(&min, None, Execution::Sequential).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn wide_window_and_full_causal_runs_match() {
        // Longest possible sequence is 14 + 3; any window covering L-1 keys
        // scores identically.
        let mut wide = tiny_config(3);
        wide.model.towers[0].stages[0].mask = MaskSpec::semi_local(12, 4, Default::default());
        let mut causal = tiny_config(3);
        causal.model.towers[0].stages[0].mask = MaskSpec::FullCausal;
        let a = train(&wide, None, Execution::Sequential).unwrap();
        let b = train(&causal, None, Execution::Sequential).unwrap();
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn lbsl_schedule_runs_and_logs_balance() {
        let mut cfg = tiny_config(6);
        cfg.data.source = DataSource::Synthetic(SyntheticSpec {
            users: 40,
            lengths: LengthDist::Pareto { shape: 1.3, min: 8, cap: 64 },
            n_candidates: 3,
            item_vocab: 16,
            ..SyntheticSpec::default()
        });
        cfg.sl.enabled = true;
        cfg.sl.mode = SlMode::Lbsl;
        cfg.sl.ell_sl = Some(12);
        cfg.sl.warmup_steps = 2;
        cfg.sl.recal_period = 2;
        cfg.sl.ranks = 2;
        let got = train(&cfg, None, Execution::Sequential).unwrap();
        assert_eq!(got.steps_run, 6);
        assert!(got.metrics.iter().all(|r| r.balance_ratio >= 1.0));
        // Scheduling must also be execution-invariant.
        let again = train(&cfg, None, Execution::Parallel).unwrap();
        assert_eq!(got.metrics, again.metrics);
    }

    #[test]
    fn standard_sl_caps_work() {
        let mut cfg = tiny_config(4);
        cfg.sl.enabled = true;
        cfg.sl.mode = SlMode::Standard;
        cfg.sl.ell_sl = Some(10);
        let got = train(&cfg, None, Execution::Sequential).unwrap();
        assert_eq!(got.steps_run, 4);
    }

    #[test]
    fn zero_init_matches_the_half_predictor_oracle() {
        let cfg = tiny_config(2);
        let examples = data::load_examples(&cfg.data).unwrap();
        let mut model = Hstu::init(cfg.model.clone(), 1).unwrap();
        for (_, _, buf) in model.tensors_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        let report = evaluate(&model, &examples, &[0, 1], Execution::Sequential, 0).unwrap();
        for &(t, ne) in &report.ne {
            // All predictions are exactly 0.5; compare against the scalar
            // oracle ratio ln(2) / H(base rate).
            let mut pos = 0usize;
            let mut n = 0usize;
            for ex in &examples {
                for c in 0..ex.labels.rows() {
                    pos += (ex.labels.get(c, t) == 1.0) as usize;
                    n += 1;
                }
            }
            let p = pos as f64 / n as f64;
            let h = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
            let expect = std::f64::consts::LN_2 / h;
            assert!((ne - expect).abs() < 1e-6, "task {t}: {ne} vs {expect}");
        }
        assert!(report.inference_flops > 0.0);
    }

    #[test]
    fn empty_history_users_evaluate_finite() {
        let cfg = tiny_config(2);
        let model = Hstu::init(cfg.model.clone(), 1).unwrap();
        let seq = EventSequence::new(
            9,
            vec![1, 2],
            vec![vec![], vec![]],
            vec![0, 0],
            2,
        )
        .unwrap();
        let labels = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let examples = vec![Example { seq, labels }];
        let report = evaluate(&model, &examples, &[0, 1], Execution::Sequential, 0).unwrap();
        for (_, ne) in report.ne {
            assert!(ne.is_finite());
        }
    }

    #[test]
    fn diverging_run_aborts_with_the_step_and_batch() {
        let mut cfg = tiny_config(6);
        cfg.optim.lr = 1e120;
        let err = train(&cfg, None, Execution::Sequential).unwrap_err().to_string();
        assert!(err.contains("aborting at step"), "{err}");
    }

    #[test]
    fn artifacts_land_on_disk_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(2);
        let got = train(&cfg, Some(dir.path()), Execution::Sequential).unwrap();
        assert!(dir.path().join("metrics.csv").is_file());
        assert!(dir.path().join("config.resolved.toml").is_file());
        let ckpt = got.checkpoint.clone().unwrap();
        let reloaded = load_model(&cfg.model, &ckpt).unwrap();
        assert_eq!(reloaded, got.model);
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with("step,task,split,ne,train_flop,infer_flop,balance_ratio"));
        let resolved =
            TrainConfig::parse(&std::fs::read_to_string(dir.path().join("config.resolved.toml")).unwrap())
                .unwrap();
        assert_eq!(resolved.model, cfg.model);
    }
}

//! Command-line front end: training, evaluation, flop accounting, scaling
//! fits, scheduler simulation, checkpoint quantization, and synthetic data
//! generation.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hstu_core::checkpoint;
use hstu_core::mat::Mat;
use hstu_core::metrics::FlopMode;
use hstu_core::model::flops_model;
use hstu_core::numerics::{fp8_quantize_rowwise, quantize_int4};
use hstu_core::sampling::LbslConfig;
use hstu_core::scaling::{fit_linear, fit_power};
use hstu_core::Execution;
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hstu_train::config::{DataSource, TrainConfig};
use hstu_train::sim::{run_paired, SimConfig};
use hstu_train::synth::{generate, LengthDist, SyntheticSpec};
use hstu_train::trainer;

#[derive(Parser)]
#[command(name = "hstu", version, about = "Sequential-recommendation training harness")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the optimizer seed (or the generator seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run per-user work on one thread instead of the worker pool.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per the configuration and write artifacts to --out.
    Train,
    /// Evaluate a checkpoint at full length on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL dataset; defaults to the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Exact flop counts of the configured model at given sequence lengths.
    BenchFlops {
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        lengths: Vec<usize>,
    },
    /// Fit linear and power-law curves to two CSV columns.
    FitScaling {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "x")]
        x: String,
        #[arg(long, default_value = "y")]
        y: String,
    },
    /// Compare load-balanced length scheduling against plain capping on a
    /// heavy-tailed workload; reports steady-phase means.
    SimulateLbsl {
        #[arg(long, default_value_t = 192)]
        ell_sl: usize,
        #[arg(long, default_value_t = 1.7465)]
        alpha: f64,
        #[arg(long, default_value_t = 1.5)]
        gamma: f64,
        #[arg(long, default_value_t = 8)]
        ranks: usize,
        #[arg(long, default_value_t = 64)]
        users_per_rank: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        recal: usize,
        #[arg(long, default_value_t = 1.5)]
        shape: f64,
        #[arg(long, default_value_t = 64)]
        min_len: usize,
        #[arg(long, default_value_t = 16384)]
        cap_len: usize,
    },
    /// Quantize checkpoint tensors, report reconstruction error, and write
    /// the dequantized checkpoint.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: QuantFormat,
        /// Group size for the int4 format.
        #[arg(long, default_value_t = 32)]
        group: usize,
    },
    /// Generate a synthetic JSONL dataset with the planted label rule.
    GenData {
        #[arg(long, default_value_t = 256)]
        users: usize,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        #[arg(long, default_value_t = 64)]
        item_vocab: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        window: usize,
        #[arg(long, default_value_t = 8)]
        min_len: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Default)]
enum QuantFormat {
    #[default]
    Fp8,
    Int4,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match cli.cmd {
        Cmd::Train => {
            let mut cfg = load_config(&cli)?;
            if let Some(seed) = cli.seed {
                cfg.optim.seed = seed;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run-out"));
            let got = trainer::train(&cfg, Some(&out), exec)?;
            println!(
                "trained {} steps; {:.3e} training flops; artifacts in {}",
                got.steps_run,
                got.train_flops,
                out.display()
            );
            for (task, ne) in &got.final_eval {
                println!("eval task {task}: ne {ne:.6}");
            }
            Ok(())
        }
        Cmd::Eval { ref checkpoint, ref data } => {
            let cfg = load_config(&cli)?;
            let model = trainer::load_model(&cfg.model, checkpoint)?;
            let examples = match data {
                Some(path) => hstu_core::dataset::read_jsonl(path)?,
                None => hstu_train::data::load_examples(&cfg.data)?,
            };
            let report =
                trainer::evaluate(&model, &examples, &cfg.eval_tasks(), exec, cfg.optim.seed)?;
            for (task, ne) in &report.ne {
                println!("{}", json!({ "task": task, "split": "eval", "ne": ne }));
            }
            println!("{}", json!({ "inference_flops": report.inference_flops }));
            Ok(())
        }
        Cmd::BenchFlops { ref lengths } => {
            let cfg = load_config(&cli)?;
            if lengths.is_empty() {
                bail!("pass at least one length");
            }
            println!("length,inference_flops,training_flops");
            for &l in lengths {
                let lens = vec![l; cfg.model.towers.len()];
                let infer = flops_model(&cfg.model, &lens, FlopMode::Inference)?;
                let train = flops_model(&cfg.model, &lens, FlopMode::Training)?;
                println!("{l},{infer},{train}");
            }
            Ok(())
        }
        Cmd::FitScaling { ref csv, ref x, ref y } => {
            let (xs, ys) = read_columns(csv, x, y)?;
            let lin = fit_linear(&xs, &ys)?;
            let result = json!({
                "points": xs.len(),
                "linear": { "slope": lin.slope, "intercept": lin.intercept, "r2": lin.r2 },
            });
            // Power-law fits need positive coordinates; report when possible.
            match fit_power(&xs, &ys) {
                Ok(p) => {
                    let mut v = result;
                    v["power"] = json!({
                        "exponent": p.exponent,
                        "coefficient": p.coefficient,
                        "r2": p.r2,
                    });
                    println!("{v}");
                }
                Err(_) => println!("{result}"),
            }
            Ok(())
        }
        Cmd::SimulateLbsl {
            ell_sl,
            alpha,
            gamma,
            ranks,
            users_per_rank,
            steps,
            warmup,
            recal,
            shape,
            min_len,
            cap_len,
        } => {
            let cfg = SimConfig {
                lbsl: LbslConfig {
                    ell_sl,
                    alpha,
                    gamma,
                    warmup_steps: warmup,
                    recal_period: recal,
                    ranks,
                },
                users_per_rank,
                steps,
                shape,
                min_len,
                cap_len,
                seed: cli.seed.unwrap_or(1),
            };
            let got = run_paired(&cfg)?;
            println!(
                "{}",
                json!({
                    "steady_steps": got.steady_steps,
                    "balanced": { "balance_ratio": got.lbsl_balance, "mean_load": got.lbsl_load },
                    "plain_cap": { "balance_ratio": got.sl_balance, "mean_load": got.sl_load },
                })
            );
            Ok(())
        }
        Cmd::Quantize { ref checkpoint, format, group } => {
            let ckpt = hstu_core::checkpoint::load(checkpoint)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run-out"));
            std::fs::create_dir_all(&out)?;
            let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
            for (name, shape, values) in ckpt_tensors(&ckpt) {
                let (deq, packed) = match format {
                    QuantFormat::Fp8 if shape.len() == 2 => {
                        let m = Mat::from_vec(shape[0], shape[1], values.to_vec())?;
                        let q = fp8_quantize_rowwise(&m)?;
                        (q.dequantize().into_vec(), shape[0] * shape[1] + shape[0] * 8)
                    }
                    QuantFormat::Fp8 => (values.to_vec(), values.len() * 8),
                    QuantFormat::Int4 => {
                        let q = quantize_int4(values, group)?;
                        let groups = values.len().div_ceil(group);
                        (q.dequantize(), values.len().div_ceil(2) + groups * 16)
                    }
                };
                let max_err = values
                    .iter()
                    .zip(&deq)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                println!(
                    "{}",
                    json!({
                        "tensor": name,
                        "max_abs_err": max_err,
                        "raw_bytes": values.len() * 8,
                        "packed_bytes": packed,
                    })
                );
                tensors.push((name.to_string(), shape.to_vec(), deq));
            }
            let refs: Vec<(String, Vec<usize>, &[f64])> =
                tensors.iter().map(|(n, s, v)| (n.clone(), s.clone(), v.as_slice())).collect();
            let mut meta = BTreeMap::new();
            meta.insert("quantized".to_string(), format!("{format:?}").to_lowercase());
            if format == QuantFormat::Int4 {
                meta.insert("group".to_string(), group.to_string());
            }
            let path = out.join("quantized.ckpt");
            checkpoint::save(&path, &refs, &meta)?;
            println!("{}", json!({ "wrote": path.display().to_string() }));
            Ok(())
        }
        Cmd::GenData {
            users,
            candidates,
            item_vocab,
            classes,
            window,
            min_len,
            max_len,
            noise,
        } => {
            let spec = SyntheticSpec {
                users,
                lengths: LengthDist::Uniform { min: min_len, max: max_len },
                n_candidates: candidates,
                item_vocab,
                classes,
                window,
                noise,
                seed: cli.seed.unwrap_or(7),
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out)?;
            let path = out.join("synthetic.jsonl");
            let data = generate(&spec)?;
            hstu_core::dataset::write_jsonl(&path, &data)?;
            let rates = spec.rates();
            println!(
                "{}",
                json!({
                    "wrote": path.display().to_string(),
                    "users": data.len(),
                    "item_vocab": spec.item_vocab,
                    "action_vocab": spec.action_vocab(),
                    "positive_rates": rates,
                })
            );
            Ok(())
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let path = cli.config.as_ref().context("--config is required for this subcommand")?;
    let cfg = TrainConfig::load(path)?;
    if let DataSource::Csv { path } = &cfg.data.source {
        if !Path::new(path).exists() {
            bail!("configured csv {path} does not exist");
        }
    }
    Ok(cfg)
}

fn ckpt_tensors(ckpt: &checkpoint::Checkpoint) -> Vec<(&str, &[usize], &[f64])> {
    ckpt.tensors
        .iter()
        .map(|t| (t.0.as_str(), t.1.as_slice(), t.2.as_slice()))
        .collect()
}

fn read_columns(path: &Path, x: &str, y: &str) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let xi = headers
        .iter()
        .position(|h| h == x)
        .with_context(|| format!("column {x:?} missing"))?;
    let yi = headers
        .iter()
        .position(|h| h == y)
        .with_context(|| format!("column {y:?} missing"))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| -> anyhow::Result<f64> {
            rec.get(i)
                .with_context(|| format!("line {line}: row too short"))?
                .trim()
                .parse::<f64>()
                .with_context(|| format!("line {line}: not a number"))
        };
        xs.push(get(xi)?);
        ys.push(get(yi)?);
    }
    if xs.is_empty() {
        bail!("{} holds no data rows", path.display());
    }
    Ok((xs, ys))
}

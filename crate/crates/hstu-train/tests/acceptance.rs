//! End-to-end acceptance checks for the whole stack, one test per criterion.
//! Each test prints a single `PASS:`/`FAIL:` verdict line with the measured
//! numbers; tolerances are pinned in the code next to each check.

use hstu_core::attention::{
    attention_forward, mask_allows, mask_nnz, Anchor, MaskSpec,
};
use hstu_core::input::EventSequence;
use hstu_core::layer::{
    layer_backward, layer_backward_remat, layer_forward, CacheMode, HstuLayerParams, LayerCache,
    LayerGrads, LayerOpts,
};
use hstu_core::mat::{dot, Mat};
use hstu_core::metrics::{flops_layer, normalized_entropy, FlopMode, PRED_CLAMP};
use hstu_core::model::{
    flops_model, EventSource, Hstu, ModelConfig, StageConfig, TowerConfig, TruncationSelect,
    TruncationSpec,
};
use hstu_core::numerics::{
    fp8_gemm_emulated, fp8_quantize_rowwise, quantize_int4, GemmBias,
};
use hstu_core::rng::stream;
use hstu_core::sampling::LbslConfig;
use hstu_core::scaling::{fit_linear, fit_power};
use hstu_core::Execution;
use hstu_train::config::{
    DataSection, DataSource, EvalSection, OptimSection, SlSection, TrainConfig,
};
use hstu_train::sim::{run_paired, SimConfig};
use hstu_train::synth::{LengthDist, SyntheticSpec};
use hstu_train::trainer;
use rand::Rng;
use std::time::Instant;

fn report(criterion: &str, ok: bool, detail: &str) {
    println!("{}: {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{criterion}: {detail}");
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rand_seq(
    rng: &mut impl Rng,
    item_vocab: u32,
    action_vocab: u32,
    hist: usize,
    cands: usize,
) -> EventSequence {
    let n = hist + cands;
    EventSequence {
        user_id: 1,
        item_ids: (0..n).map(|_| rng.random_range(0..item_vocab)).collect(),
        action_sets: (0..n)
            .map(|i| if i < hist { vec![rng.random_range(0..action_vocab)] } else { Vec::new() })
            .collect(),
        timestamps: (0..n as i64).collect(),
        n_candidates: cands,
    }
}

fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

// Tolerance 1e-4 on every parameter gradient of complete models against
// central finite differences, across at least 20 model shapes covering both
// mask families, one and two heads, and one and two towers. Inputs enter
// through the embedding tables, so probing those rows covers the input path.
#[test]
fn acceptance_01_gradients_match_finite_differences() {
    const REL_TOL: f64 = 1e-4;
    let t0 = Instant::now();
    let mut rng = stream(101, &[1]);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..20 {
        let heads = 1 + (i % 2);
        let d = [4usize, 8, 16][i % 3];
        let k1 = rng.random_range(0..=8);
        let k2 = rng.random_range(0..=8);
        let mask = match i % 4 {
            0 => MaskSpec::FullCausal,
            1 => MaskSpec::semi_local(k1, k2, Anchor::Start),
            2 => MaskSpec::semi_local(k1, k2, Anchor::End),
            _ => MaskSpec::semi_local(0, k2, Anchor::Start),
        };
        let two_towers = i % 5 == 4;
        let mut towers = vec![TowerConfig {
            source: EventSource::All,
            stages: vec![StageConfig { layers: 1 + (i % 2), mask, truncate: None }],
        }];
        if two_towers {
            towers.push(TowerConfig {
                source: EventSource::Action(0),
                stages: vec![StageConfig { layers: 1, mask: MaskSpec::FullCausal, truncate: None }],
            });
        }
        let cfg = ModelConfig {
            d,
            heads,
            item_vocab: 12,
            action_vocab: 4,
            tasks: 1 + (i % 2),
            attn_normalize: i % 7 != 0,
            fp8: false,
            towers,
        };
        let mut model = Hstu::init(cfg.clone(), 1000 + i as u64).unwrap();
        let cands = 1 + rng.random_range(0..2);
        let seqs: Vec<EventSequence> = (0..cfg.towers.len())
            .map(|_| {
                let hist = rng.random_range(1..=6);
                rand_seq(&mut rng, 12, 4, hist, cands)
            })
            .collect();
        let labels =
            Mat::from_fn(cands, cfg.tasks, |_, _| f64::from(rng.random_range(0..2u8)));

        let (_, cache) = model.forward(&seqs, CacheMode::Full, 0).unwrap();
        let (_, grads) = model.backward(&cache, &seqs, &labels).unwrap();
        let analytic: Vec<(String, Vec<f64>)> =
            grads.tensors().into_iter().map(|(n, _, v)| (n, v.to_vec())).collect();

        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            for j in 0..analytic[ti].1.len() {
                let old = model.tensors_mut()[ti].2[j];
                let h = 1e-5 * old.abs().max(1.0);
                let mut loss_at = |v: f64| -> f64 {
                    model.tensors_mut()[ti].2[j] = v;
                    let (_, c) = model.forward(&seqs, CacheMode::Minimal, 0).unwrap();
                    model.backward(&c, &seqs, &labels).unwrap().0
                };
                let fd = (loss_at(old + h) - loss_at(old - h)) / (2.0 * h);
                model.tensors_mut()[ti].2[j] = old;
                let e = rel(fd, analytic[ti].1[j], 1e-6);
                worst = worst.max(e);
                checked += 1;
                assert!(
                    e < REL_TOL,
                    "config {i} tensor {} index {j}: fd {fd} vs analytic {}",
                    analytic[ti].0,
                    analytic[ti].1[j]
                );
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        "criterion 1 (gradient fidelity)",
        worst < REL_TOL && secs < 60.0,
        &format!("{checked} gradients over 20 models, worst rel err {worst:.2e}, {secs:.1}s"),
    );
}

// The rematerializing backward must reproduce the full-cache backward to
// 1e-12 relative on 100 random layers, and the minimal cache must cost at
// most 0.40 of the full cache in bytes at d=512, L=3072.
#[test]
fn acceptance_02_remat_backward_and_cache_budget() {
    const REL_TOL: f64 = 1e-12;
    let mut rng = stream(202, &[1]);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let d = [4usize, 8, 12, 16][i % 4];
        let heads = if d % 2 == 0 && i % 3 == 0 { 2 } else { 1 };
        let l = 1 + rng.random_range(0..12);
        let mask = if i % 2 == 0 {
            MaskSpec::FullCausal
        } else {
            MaskSpec::semi_local(
                rng.random_range(0..=6),
                rng.random_range(0..=6),
                if i % 4 == 1 { Anchor::Start } else { Anchor::End },
            )
        };
        let opts = LayerOpts { heads, normalize: i % 5 != 0, fp8: false };
        let params = HstuLayerParams::init(d, &mut rng);
        let x = rand_mat(&mut rng, l, d);
        let d_out = rand_mat(&mut rng, l, d);

        let (out_f, cache_f) = layer_forward(&x, &params, &mask, &opts, CacheMode::Full).unwrap();
        let (out_m, cache_m) =
            layer_forward(&x, &params, &mask, &opts, CacheMode::Minimal).unwrap();
        assert_eq!(out_f.data(), out_m.data(), "layer {i}: outputs diverge across cache modes");

        let (dx_f, g_f) = layer_backward(&d_out, &cache_f, &params, &mask, &opts).unwrap();
        let (dx_m, g_m) = layer_backward_remat(&d_out, &cache_m, &params, &mask, &opts).unwrap();
        for (a, b) in dx_f.data().iter().zip(dx_m.data()) {
            worst = worst.max(rel(*a, *b, 1e-300));
        }
        for (name, a, b) in grad_pairs(&g_f, &g_m) {
            for (x, y) in a.iter().zip(&b) {
                let e = rel(*x, *y, 1e-300);
                assert!(e <= REL_TOL, "layer {i} grad {name}: {x} vs {y}");
                worst = worst.max(e);
            }
        }
    }

    let (d, l) = (512usize, 3072usize);
    let full = LayerCache::Full {
        x: Mat::zeros(l, d),
        ln_mean: vec![0.0; l],
        ln_inv_std: vec![0.0; l],
        normed: Mat::zeros(l, d),
        fused: Mat::zeros(l, 4 * d),
        attn: Mat::zeros(l, d),
        y: Mat::zeros(l, d),
    };
    let minimal = LayerCache::Minimal {
        x: Mat::zeros(l, d),
        ln_mean: vec![0.0; l],
        ln_inv_std: vec![0.0; l],
        u: Mat::zeros(l, d),
        attn: Mat::zeros(l, d),
    };
    let ratio = minimal.bytes() as f64 / full.bytes() as f64;
    report(
        "criterion 2 (rematerialized backward)",
        worst <= REL_TOL && ratio <= 0.40,
        &format!("100 layers, worst rel err {worst:.2e}; cache byte ratio {ratio:.4} (bound 0.40)"),
    );
}

fn grad_pairs(a: &LayerGrads, b: &LayerGrads) -> Vec<(&'static str, Vec<f64>, Vec<f64>)> {
    vec![
        ("norm_scale", a.norm_scale.clone(), b.norm_scale.clone()),
        ("norm_bias", a.norm_bias.clone(), b.norm_bias.clone()),
        ("w1", a.w1.data().to_vec(), b.w1.data().to_vec()),
        ("b1", a.b1.clone(), b.b1.clone()),
        ("gate_scale", a.gate_scale.clone(), b.gate_scale.clone()),
        ("gate_bias", a.gate_bias.clone(), b.gate_bias.clone()),
        ("w2", a.w2.data().to_vec(), b.w2.data().to_vec()),
        ("b2", a.b2.clone(), b.b2.clone()),
    ]
}

// Mask membership and pair counts against a from-first-principles
// enumeration for every L <= 64 and every K1, K2 <= L under both anchors;
// wide windows reproduce full-causal attention; the attention work counter
// equals the pair count exactly.
#[test]
fn acceptance_03_semi_local_mask_matches_enumeration() {
    // One line of definition, written independently of the library: causal,
    // and either within the recency band or one of the K2 anchored keys.
    fn oracle(l: usize, q: usize, k: usize, k1: usize, k2: usize, anchor: Anchor) -> bool {
        let global = match anchor {
            Anchor::Start => k < k2,
            Anchor::End => k2 > 0 && k >= l - k2,
        };
        k <= q && (q - k <= k1 || global)
    }
    let mut pairs = 0u64;
    for l in 1..=64usize {
        for k1 in 0..=l {
            for k2 in 0..=l {
                for &anchor in &[Anchor::Start, Anchor::End] {
                    let spec = MaskSpec::semi_local(k1, k2, anchor);
                    let mut count = 0u64;
                    for q in 0..l {
                        for k in 0..l {
                            let want = oracle(l, q, k, k1, k2, anchor);
                            let got = mask_allows(&spec, l, q, k).unwrap();
                            assert_eq!(
                                got, want,
                                "L={l} K1={k1} K2={k2} {anchor:?} q={q} k={k}"
                            );
                            count += u64::from(want);
                            pairs += 1;
                        }
                    }
                    assert_eq!(mask_nnz(&spec, l).unwrap(), count, "nnz L={l} K1={k1} K2={k2}");
                }
            }
        }
        let full = MaskSpec::FullCausal;
        let mut count = 0u64;
        for q in 0..l {
            for k in 0..l {
                let want = k <= q;
                assert_eq!(mask_allows(&full, l, q, k).unwrap(), want);
                count += u64::from(want);
            }
        }
        assert_eq!(mask_nnz(&full, l).unwrap(), count);
    }

    // Start-anchored windows with K1 + K2 >= L - 1 cover the whole causal
    // triangle, so attention must match full-causal. (End-anchored globals
    // do not cover it: early queries cannot see keys that only become
    // global near the end of the sequence.)
    let mut rng = stream(303, &[1]);
    let mut worst = 0.0f64;
    for _ in 0..30 {
        let l = 1 + rng.random_range(0..32);
        let k1 = rng.random_range(0..l);
        let k2 = l - 1 - k1 + rng.random_range(0..=1).min(l - (l - 1 - k1));
        assert!(k1 + k2 >= l - 1);
        let dv = 1 + rng.random_range(0..8);
        let q = rand_mat(&mut rng, l, dv);
        let k = rand_mat(&mut rng, l, dv);
        let v = rand_mat(&mut rng, l, dv);
        let wide = attention_forward(&q, &k, &v, &MaskSpec::semi_local(k1, k2, Anchor::Start), true)
            .unwrap();
        let full = attention_forward(&q, &k, &v, &MaskSpec::FullCausal, true).unwrap();
        for (a, b) in wide.out.data().iter().zip(full.out.data()) {
            worst = worst.max(rel(*a, *b, 1e-300));
        }
        assert!(worst <= 1e-12, "wide window diverged from full causal: {worst}");
    }

    // The work counter reports exactly the allowed pairs it visited.
    for i in 0..100 {
        let l = 1 + (i * 7) % 40;
        let k1 = (i * 3) % (l + 1);
        let k2 = (i * 5) % (l + 1);
        let anchor = if i % 2 == 0 { Anchor::Start } else { Anchor::End };
        let spec = MaskSpec::semi_local(k1, k2, anchor);
        let dv = 1 + i % 6;
        let q = rand_mat(&mut rng, l, dv);
        let k = rand_mat(&mut rng, l, dv);
        let v = rand_mat(&mut rng, l, dv);
        let got = attention_forward(&q, &k, &v, &spec, true).unwrap();
        assert_eq!(got.visited, mask_nnz(&spec, l).unwrap(), "work counter at L={l}");
    }
    report(
        "criterion 3 (semi-local mask correctness)",
        true,
        &format!(
            "{pairs} (q,k) memberships enumerated; wide-window vs full-causal worst rel err {worst:.2e}; work counter exact on 100 cases"
        ),
    );
}

// Attention flops must double (ratio in [1.9, 2.1]) when L doubles under a
// fixed semi-local window, and roughly quadruple ([3.8, 4.2]) under full
// causal; itemized counts match closed forms with zero tolerance.
#[test]
fn acceptance_04_attention_cost_is_linear_in_length() {
    // Closed forms: the start-anchored window of total width W = K1 + K2 + 1
    // allows min(q + 1, W) keys per row once L >= W.
    fn semi_local_nnz(l: usize, k1: usize, k2: usize) -> f64 {
        let w = k1 + k2 + 1;
        assert!(l >= w, "closed form stated for L >= W");
        (w * (w + 1) / 2 + (l - w) * w) as f64
    }
    fn full_nnz(l: usize) -> f64 {
        (l * (l + 1) / 2) as f64
    }

    let d = 64usize;
    let heads = 4usize;
    let dh = (d / heads) as f64;
    for &(l, k1, k2) in &[
        (17usize, 8usize, 8usize),
        (32, 8, 8),
        (64, 16, 8),
        (128, 8, 8),
        (256, 8, 8),
        (333, 0, 12),
        (96, 12, 0),
    ] {
        let spec = MaskSpec::semi_local(k1, k2, Anchor::Start);
        let f = flops_layer(l, d, heads, &spec).unwrap();
        assert_eq!(f.attention, heads as f64 * semi_local_nnz(l, k1, k2) * (4.0 * dh + 4.0));
        assert_eq!(f.gemm_fused, 2.0 * (l * d * 4 * d) as f64);
        assert_eq!(f.gemm_out, 2.0 * (l * d * d) as f64);
        let fc = flops_layer(l, d, heads, &MaskSpec::FullCausal).unwrap();
        assert_eq!(fc.attention, heads as f64 * full_nnz(l) * (4.0 * dh + 4.0));
    }

    // Fixed window K1 = K2 = 8 at L = 128 (comfortably past L >= 2(K1+K2)).
    let spec = MaskSpec::semi_local(8, 8, Anchor::Start);
    let a1 = flops_layer(128, d, heads, &spec).unwrap().attention;
    let a2 = flops_layer(256, d, heads, &spec).unwrap().attention;
    let local_ratio = a2 / a1;
    let c1 = flops_layer(128, d, heads, &MaskSpec::FullCausal).unwrap().attention;
    let c2 = flops_layer(256, d, heads, &MaskSpec::FullCausal).unwrap().attention;
    let causal_ratio = c2 / c1;
    let ok = (1.9..=2.1).contains(&local_ratio) && (3.8..=4.2).contains(&causal_ratio);
    report(
        "criterion 4 (linear attention cost)",
        ok,
        &format!(
            "semi-local doubling ratio {local_ratio:.4} in [1.9, 2.1]; full-causal {causal_ratio:.4} in [3.8, 4.2]; itemized counts exact"
        ),
    );
}

// Reference budget/quality measurements for the dense-attention stack and
// the semi-local stack: (compute budget, eval NE gain over that arm's
// smallest run). Training budgets are petaflop-days, inference budgets are
// petaflops per query batch.
const DENSE_TRAIN: [(f64, f64); 3] = [(0.085, 0.0), (0.735, 0.34), (1.584, 0.44)];
const LOCAL_TRAIN: [(f64, f64); 3] = [(0.119, 0.0), (0.414, 0.58), (0.639, 0.78)];
const DENSE_INFER: [(f64, f64); 3] = [(0.118, 0.0), (2.756, 0.34), (4.692, 0.44)];
const LOCAL_INFER: [(f64, f64); 3] = [(0.070, 0.0), (0.337, 0.58), (0.436, 0.78)];

fn split_xy(pts: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    (pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect())
}

// Quality-per-budget advantage of the semi-local stack over the dense one,
// fitted from the reference points: OLS slope ratios must land at 5.3 +/-
// 0.2 (training) and 21.4 +/- 0.5 (inference); power-law exponent ratios
// within 15% of 2.08x (training) and 4.59x (inference).
#[test]
fn acceptance_05_scaling_fit_slope_and_exponent_ratios() {
    fn slope_ratio(fast: &[(f64, f64)], slow: &[(f64, f64)]) -> f64 {
        let (fx, fy) = split_xy(fast);
        let (sx, sy) = split_xy(slow);
        fit_linear(&fx, &fy).unwrap().slope / fit_linear(&sx, &sy).unwrap().slope
    }
    // Power laws need positive gains, so each arm's zero-gain smallest run
    // anchors the fit only through the remaining two points.
    fn exponent_ratio(fast: &[(f64, f64)], slow: &[(f64, f64)]) -> f64 {
        let pos = |pts: &[(f64, f64)]| -> f64 {
            let kept: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1 > 0.0).collect();
            let (x, y) = split_xy(&kept);
            fit_power(&x, &y).unwrap().exponent
        };
        pos(fast) / pos(slow)
    }

    let train_slope = slope_ratio(&LOCAL_TRAIN, &DENSE_TRAIN);
    let infer_slope = slope_ratio(&LOCAL_INFER, &DENSE_INFER);
    let train_exp = exponent_ratio(&LOCAL_TRAIN, &DENSE_TRAIN);
    let infer_exp = exponent_ratio(&LOCAL_INFER, &DENSE_INFER);

    let train_slope_ok = (5.1..=5.5).contains(&train_slope);
    let infer_slope_ok = (20.9..=21.9).contains(&infer_slope);
    let train_exp_ok = (2.08 * 0.85..=2.08 * 1.15).contains(&train_exp);
    // The reference points pin the two inference exponents near 0.48 and
    // 1.15, a ratio of ~2.37; no fit of these points reaches the required
    // band, so this check documents the shortfall rather than hiding it.
    let infer_exp_ok = (4.59 * 0.85..=4.59 * 1.15).contains(&infer_exp);
    report(
        "criterion 5 (scaling-fit reproduction)",
        train_slope_ok && infer_slope_ok && train_exp_ok && infer_exp_ok,
        &format!(
            "train slope ratio {train_slope:.4} in [5.1, 5.5] ({}); inference slope ratio {infer_slope:.4} in [20.9, 21.9] ({}); train exponent ratio {train_exp:.4} in [1.77, 2.39] ({}); inference exponent ratio {infer_exp:.4} in [3.90, 5.28] ({})",
            verdict(train_slope_ok),
            verdict(infer_slope_ok),
            verdict(train_exp_ok),
            verdict(infer_exp_ok),
        ),
    );
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "out of band"
    }
}

// The metric must equal 1 for the base-rate predictor to 1e-9 on 1000
// random label vectors, and match a scalar reimplementation to 1e-12 on
// arbitrary predictions.
#[test]
fn acceptance_06_ne_of_base_rate_is_one() {
    let mut rng = stream(606, &[1]);
    let mut worst_one = 0.0f64;
    let mut worst_formula = 0.0f64;
    for _ in 0..1000 {
        let n = 20 + rng.random_range(0..380);
        let p = rng.random_range(0.02..0.98);
        let labels: Vec<f64> = loop {
            let draw: Vec<f64> =
                (0..n).map(|_| f64::from(rng.random_range(0.0..1.0) < p)).collect();
            let s: f64 = draw.iter().sum();
            if s > 0.0 && s < n as f64 {
                break draw;
            }
        };
        let base = labels.iter().sum::<f64>() / n as f64;
        let ne = normalized_entropy(&vec![base; n], &labels).unwrap();
        worst_one = worst_one.max((ne - 1.0).abs());

        // Scalar oracle: clamped mean cross-entropy over base-rate entropy.
        let preds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let got = normalized_entropy(&preds, &labels).unwrap();
        let mut ce = 0.0;
        for (&pr, &y) in preds.iter().zip(&labels) {
            let pr = pr.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            ce -= y * pr.ln() + (1.0 - y) * (1.0 - pr).ln();
        }
        ce /= n as f64;
        let h = -(base * base.ln() + (1.0 - base) * (1.0 - base).ln());
        worst_formula = worst_formula.max((got - ce / h).abs());
    }
    report(
        "criterion 6 (normalized-entropy metric)",
        worst_one < 1e-9 && worst_formula < 1e-12,
        &format!(
            "base-rate NE within {worst_one:.2e} of 1 (bound 1e-9); formula within {worst_formula:.2e} of scalar oracle (bound 1e-12)"
        ),
    );
}

// A 2-layer windowed model must learn the planted last-8-events task to an
// eval NE below the midpoint between the analytic noise floor and 1.0,
// within 5000 steps and 10 minutes; the same model restricted to
// diagonal-only attention must do strictly worse at the same step count.
#[test]
fn acceptance_07_windowed_model_learns_planted_task() {
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        users: 512,
        lengths: LengthDist::Uniform { min: 8, max: 8 },
        n_candidates: 4,
        item_vocab: 64,
        classes: 4,
        window: 8,
        noise: 0.0,
        seed: 7,
    };
    let floors = spec.bayes_floor();
    let rates = spec.rates();
    let model_with = |k1: usize, k2: usize| ModelConfig {
        d: 32,
        heads: 4,
        item_vocab: 64,
        action_vocab: 4,
        tasks: 2,
        attn_normalize: true,
        fp8: false,
        towers: vec![TowerConfig {
            source: EventSource::All,
            stages: vec![StageConfig {
                layers: 2,
                mask: MaskSpec::semi_local(k1, k2, Anchor::Start),
                truncate: None,
            }],
        }],
    };
    let cfg_with = |k1: usize, k2: usize, steps: usize, stop: Option<f64>| TrainConfig {
        model: model_with(k1, k2),
        data: DataSection {
            source: DataSource::Synthetic(spec.clone()),
            l_max: None,
            batch_size: 16,
            steps,
        },
        sl: SlSection::default(),
        optim: OptimSection { lr: 1e-3, seed: 1, ..Default::default() },
        eval: EvalSection { split_fraction: 0.15, eval_every: 50, stop_ne: stop, tasks: vec![] },
    };

    let windowed =
        trainer::train(&cfg_with(16, 8, 5000, Some(0.2)), None, Execution::Parallel).unwrap();
    let diagonal = trainer::train(
        &cfg_with(0, 0, windowed.steps_run, None),
        None,
        Execution::Parallel,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let mut ok = windowed.steps_run <= 5000 && secs < 600.0;
    let mut parts = Vec::new();
    for (t, &(task, ne)) in windowed.final_eval.iter().enumerate() {
        // Entropy of the planted rule's output given full information is 0
        // (noise-free), so the floor is the clamp artifact, effectively 0.
        let midpoint = (floors[t] / entropy(rates[t]) + 1.0) / 2.0;
        let diag_ne = diagonal.final_eval[t].1;
        ok &= ne < midpoint && ne < diag_ne;
        parts.push(format!(
            "task {task}: windowed NE {ne:.4} < midpoint {midpoint:.4} and < diagonal NE {diag_ne:.4}"
        ));
    }
    report(
        "criterion 7 (planted-task learnability)",
        ok,
        &format!("{} after {} steps in {secs:.1}s", parts.join("; "), windowed.steps_run),
    );
}

fn entropy(p: f64) -> f64 {
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

// On a Pareto-length workload over 8 ranks the balanced scheduler must win
// on steady-phase balance ratio against plain per-user capping in at least
// 9 of 10 paired seeds, and with per-step recalibration its realized load
// must sit within 5% of the plain scheduler's.
#[test]
fn acceptance_08_balanced_scheduler_wins_on_skewed_loads() {
    let base = |seed: u64, recal: usize| SimConfig {
        lbsl: LbslConfig {
            ell_sl: 192,
            alpha: 1.7465,
            gamma: 1.5,
            warmup_steps: 10,
            recal_period: recal,
            ranks: 8,
        },
        users_per_rank: 64,
        steps: 500,
        shape: 1.5,
        min_len: 64,
        cap_len: 16384,
        seed,
    };
    let mut wins = 0usize;
    let mut first = (0.0, 0.0);
    for seed in 0..10 {
        let got = run_paired(&base(seed, 10)).unwrap();
        if got.lbsl_balance < got.sl_balance {
            wins += 1;
        }
        if seed == 0 {
            first = (got.lbsl_balance, got.sl_balance);
        }
    }
    let (mut lb, mut sl) = (0.0, 0.0);
    for seed in 0..10 {
        let got = run_paired(&base(seed, 1)).unwrap();
        lb += got.lbsl_load / 10.0;
        sl += got.sl_load / 10.0;
    }
    let load_gap = (lb - sl).abs() / sl;
    report(
        "criterion 8 (balanced length scheduling)",
        wins >= 9 && load_gap <= 0.05,
        &format!(
            "balance wins {wins}/10 (seed 0: {:.4} vs {:.4}); per-step-recalibrated load within {:.2}% of plain capping (bound 5%)",
            first.0,
            first.1,
            100.0 * load_gap
        ),
    );
}

// Groupwise int4 reconstruction must stay within half a quantization step
// elementwise over 10^4 random rows; emulated fp8 GEMM must respect a
// triangle-inequality error bound on 100 random instances and be exact on
// identity and cancellation patterns.
#[test]
fn acceptance_09_quantization_error_bounds() {
    let mut rng = stream(909, &[1]);
    let mut worst_frac = 0.0f64;
    for i in 0..10_000 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let row: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let group = [8usize, 16, 32, 64][i % 4];
        let q = quantize_int4(&row, group).unwrap();
        let deq = q.dequantize();
        for (j, (&x, &x_hat)) in row.iter().zip(&deq).enumerate() {
            let s = q.scales()[j / group];
            let bound = s / 2.0 + 1e-12 * (1.0 + 15.0 * s);
            assert!(
                (x - x_hat).abs() <= bound,
                "row {i} elem {j}: err {} step {s}",
                (x - x_hat).abs()
            );
            if s > 0.0 {
                worst_frac = worst_frac.max((x - x_hat).abs() / s);
            }
        }
    }

    let mut worst_slack = f64::INFINITY;
    for i in 0..100 {
        let (m, k, n) = (1 + i % 5, 1 + (i * 3) % 7, 1 + (i * 5) % 4);
        let scale = 10f64.powf(rng.random_range(-2.0..3.0));
        let a = Mat::from_fn(m, k, |_, _| rng.random_range(-1.0..1.0) * scale);
        let b = Mat::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0) * scale);
        let bt = Mat::from_fn(n, k, |i, j| b.get(j, i));
        let qa = fp8_quantize_rowwise(&a).unwrap();
        let qbt = fp8_quantize_rowwise(&bt).unwrap();
        let got = fp8_gemm_emulated(&qa, &qbt, GemmBias::None).unwrap();
        let da = qa.dequantize();
        let dbt = qbt.dequantize();
        for r in 0..m {
            for c in 0..n {
                let mut exact = 0.0;
                let mut bound = 0.0;
                let mut mag = 0.0;
                for t in 0..k {
                    let (av, bv) = (a.get(r, t), b.get(t, c));
                    let (ah, bh) = (da.get(r, t), dbt.get(c, t));
                    exact += av * bv;
                    // |ab - a^b^| <= |a - a^||b| + |a^||b - b^| per term.
                    bound += (av - ah).abs() * bv.abs() + ah.abs() * (bv - bh).abs();
                    mag += ah.abs() * bh.abs();
                }
                let slack = bound + 1e-9 * (1.0 + mag);
                let err = (exact - got.get(r, c)).abs();
                assert!(err <= slack, "gemm {i} ({r},{c}): err {err} bound {slack}");
                worst_slack = worst_slack.min(slack - err);
            }
        }
    }

    // Exactness: every entry below is representable, row maxima sit at the
    // format's top value so the row scales are exactly 1, and B = 448*I
    // turns the product into one exact term per output.
    let a = Mat::from_vec(
        2,
        4,
        vec![448.0, 2.0, -0.5, 1.0, 64.0, -448.0, 0.25, 8.0],
    )
    .unwrap();
    let big_i = Mat::from_fn(4, 4, |i, j| if i == j { 448.0 } else { 0.0 });
    let qa = fp8_quantize_rowwise(&a).unwrap();
    let qb = fp8_quantize_rowwise(&big_i).unwrap();
    let got = fp8_gemm_emulated(&qa, &qb, GemmBias::None).unwrap();
    for r in 0..2 {
        for c in 0..4 {
            assert_eq!(got.get(r, c), 448.0 * a.get(r, c), "identity-pattern entry ({r},{c})");
        }
    }
    let x = rng.random_range(-5.0..5.0);
    let qrow = fp8_quantize_rowwise(&Mat::from_vec(1, 2, vec![x, x]).unwrap()).unwrap();
    let qcol = fp8_quantize_rowwise(&Mat::from_vec(1, 2, vec![448.0, -448.0]).unwrap()).unwrap();
    let zero = fp8_gemm_emulated(&qrow, &qcol, GemmBias::None).unwrap();
    assert_eq!(zero.get(0, 0), 0.0, "cancellation must be exact");

    report(
        "criterion 9 (quantization error bounds)",
        true,
        &format!(
            "int4 worst err {worst_frac:.4} of a step (bound 0.5) over 10^4 rows; fp8 gemm inside triangle bound on 100 instances (min slack {worst_slack:.2e}); identity and cancellation exact"
        ),
    );
}

// Keep-everything truncation must be bitwise inert, staged truncation must
// equal a manual layer-by-layer oracle, and truncating must strictly lower
// the flop count.
#[test]
fn acceptance_10_truncation_composition_and_flops() {
    let mut rng = stream(1010, &[1]);
    let mask = MaskSpec::semi_local(8, 4, Anchor::Start);
    let stage = |layers: usize, mask: MaskSpec, keep: Option<usize>| StageConfig {
        layers,
        mask,
        truncate: keep.map(|k| TruncationSpec { keep: k, select: TruncationSelect::Latest }),
    };
    let cfg_of = |stages: Vec<StageConfig>| ModelConfig {
        d: 16,
        heads: 2,
        item_vocab: 24,
        action_vocab: 4,
        tasks: 2,
        attn_normalize: true,
        fp8: false,
        towers: vec![TowerConfig { source: EventSource::All, stages }],
    };
    let seq = rand_seq(&mut rng, 24, 4, 10, 2);

    // A second stage that keeps at least every row must leave the run
    // bitwise identical to the same depth without a truncation marker:
    // initialization draws depend only on the per-tower layer count.
    let inert = Hstu::init(
        cfg_of(vec![stage(2, mask, None), stage(1, mask, Some(10_000))]),
        5,
    )
    .unwrap();
    let plain = Hstu::init(cfg_of(vec![stage(3, mask, None)]), 5).unwrap();
    let (p_inert, _) = inert.forward(std::slice::from_ref(&seq), CacheMode::Minimal, 0).unwrap();
    let (p_plain, _) = plain.forward(std::slice::from_ref(&seq), CacheMode::Minimal, 0).unwrap();
    let bits_equal = p_inert
        .data()
        .iter()
        .zip(p_plain.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    assert!(bits_equal, "keep-everything truncation changed the forward bits");

    // Manual oracle for a truncating two-stage composition.
    let cfg = cfg_of(vec![stage(2, mask, None), stage(1, MaskSpec::FullCausal, Some(6))]);
    let model = Hstu::init(cfg, 5).unwrap();
    let (probs, _) = model.forward(std::slice::from_ref(&seq), CacheMode::Minimal, 0).unwrap();
    let opts = LayerOpts { heads: 2, normalize: true, fp8: false };
    let mut x = hstu_core::input::embed_sequence(&seq, &model.tables).unwrap();
    for layer in 0..2 {
        let (nx, _) =
            layer_forward(&x, &model.towers[0][layer], &mask, &opts, CacheMode::Minimal).unwrap();
        x = nx;
    }
    let keep = 6;
    let mut cut = Mat::zeros(keep, 16);
    for r in 0..keep {
        cut.row_mut(r).copy_from_slice(x.row(x.rows() - keep + r));
    }
    let (after, _) = layer_forward(
        &cut,
        &model.towers[0][2],
        &MaskSpec::FullCausal,
        &opts,
        CacheMode::Minimal,
    )
    .unwrap();
    let mut manual_ok = true;
    for c in 0..2 {
        let h = after.row(after.rows() - 2 + c);
        for (t, head) in model.heads.iter().enumerate() {
            let z = dot(h, &head.w) + head.b;
            let p = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            manual_ok &= p.to_bits() == probs.get(c, t).to_bits();
        }
    }
    assert!(manual_ok, "staged forward diverged from the manual composition");

    // Strictly fewer flops once the second stage runs on fewer rows.
    let l = seq.item_ids.len();
    let f_trunc =
        flops_model(&cfg_of(vec![stage(2, mask, None), stage(1, mask, Some(6))]), &[l], FlopMode::Inference)
            .unwrap();
    let f_full = flops_model(&cfg_of(vec![stage(3, mask, None)]), &[l], FlopMode::Inference).unwrap();
    let f_inert = flops_model(
        &cfg_of(vec![stage(2, mask, None), stage(1, mask, Some(10_000))]),
        &[l],
        FlopMode::Inference,
    )
    .unwrap();
    assert!(f_trunc < f_full, "truncated stage must cost less: {f_trunc} vs {f_full}");
    assert_eq!(f_inert, f_full, "keep-everything truncation must not change the count");

    report(
        "criterion 10 (truncation and composition)",
        true,
        &format!(
            "keep-all stage bitwise inert; staged forward equals manual oracle bitwise; flops {f_trunc:.3e} < {f_full:.3e} with truncation"
        ),
    );
}

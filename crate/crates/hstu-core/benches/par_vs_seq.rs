//! Parallel vs sequential execution over a batch of sequences.
//!
//! The unit of parallelism is the sequence: forward/backward passes and
//! embedding fan out across a batch with rayon when the `parallel` feature
//! is on, and the sequential strategy runs the identical code on one
//! thread. Results are bitwise identical; this suite measures the cost gap
//! on this machine.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hstu_core::attention::{Anchor, MaskSpec};
use hstu_core::layer::{
    layer_backward_remat, layer_forward, CacheMode, HstuLayerParams, LayerOpts,
};
use hstu_core::mat::Mat;
use hstu_core::par::{map_indexed, Execution};
use hstu_core::rng;
use hstu_core::sampling::{LbslConfig, LbslState};
use rand::Rng;
use std::hint::black_box;

fn batch(sizes: &[usize], d: usize, seed: u64) -> Vec<Mat> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let mut r = rng::stream(seed, &[i as u64]);
            Mat::from_fn(l, d, |_, _| r.random_range(-1.0..1.0))
        })
        .collect()
}

fn layer_pass(xs: &[Mat], params: &HstuLayerParams, exec: Execution) -> f64 {
    let spec = MaskSpec::semi_local(32, 8, Anchor::Start);
    let opts = LayerOpts { heads: 4, normalize: true, fp8: false };
    let outs = map_indexed(exec, xs.len(), |i| {
        let (out, cache) =
            layer_forward(&xs[i], params, &spec, &opts, CacheMode::Minimal).unwrap();
        let dz = Mat::from_fn(out.rows(), out.cols(), |_, _| 1.0);
        let (dx, _) = layer_backward_remat(&dz, &cache, params, &spec, &opts).unwrap();
        out.data().iter().sum::<f64>() + dx.data().iter().sum::<f64>()
    });
    outs.iter().sum()
}

fn bench_layer_batch(c: &mut Criterion) {
    let d = 32;
    let sizes: Vec<usize> = (0..16).map(|i| 48 + 16 * (i % 5)).collect();
    let xs = batch(&sizes, d, 7);
    let mut r = rng::stream(7, &[1000]);
    let params = HstuLayerParams::init(d, &mut r);
    let mut g = c.benchmark_group("layer_fwd_bwd_batch");
    for exec in [Execution::Sequential, Execution::Parallel] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| black_box(layer_pass(&xs, &params, e)))
        });
    }
    g.finish();
}

fn bench_lbsl(c: &mut Criterion) {
    let cfg = LbslConfig {
        ell_sl: 192,
        alpha: 1.75,
        gamma: 1.5,
        warmup_steps: 4,
        recal_period: 16,
        ranks: 8,
    };
    let mut r = rng::stream(3, &[0]);
    let batches: Vec<Vec<usize>> = (0..8)
        .map(|_| (0..64).map(|_| r.random_range(64..4096usize)).collect())
        .collect();
    c.bench_function("lbsl_step_8_ranks_64_users", |b| {
        b.iter(|| {
            let mut st = LbslState::new(cfg, 11).unwrap();
            for _ in 0..8 {
                black_box(st.step(black_box(&batches)).unwrap());
            }
        })
    });
}

criterion_group!(benches, bench_layer_batch, bench_lbsl);
criterion_main!(benches);

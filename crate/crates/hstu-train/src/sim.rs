//! Loads-only simulation of stochastic-length scheduling on a heavy-tailed
//! workload: the same user-length stream is fed to the load-balanced
//! scheduler and to plain per-user capping, so their balance and realized
//! load can be compared pairwise.

use anyhow::Result;
use hstu_core::rng;
use hstu_core::sampling::{balance_ratio, rank_load, LbslConfig, LbslState};
use rand_distr::{Distribution, Pareto};

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub lbsl: LbslConfig,
    pub users_per_rank: usize,
    pub steps: usize,
    /// Pareto tail exponent of the user-length distribution.
    pub shape: f64,
    pub min_len: usize,
    pub cap_len: usize,
    pub seed: u64,
}

/// Steady-phase (post-warmup) means over the paired arms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOutcome {
    pub lbsl_balance: f64,
    pub sl_balance: f64,
    /// Mean per-rank realized load per step.
    pub lbsl_load: f64,
    pub sl_load: f64,
    pub steady_steps: usize,
}

pub fn run_paired(cfg: &SimConfig) -> Result<SimOutcome> {
    let mut state = LbslState::new(cfg.lbsl, cfg.seed)?;
    let ranks = cfg.lbsl.ranks;
    let ell = cfg.lbsl.ell_sl;
    let gamma = cfg.lbsl.gamma;
    let pareto = Pareto::new(cfg.min_len as f64, cfg.shape).expect("positive shape");

    let mut out = SimOutcome {
        lbsl_balance: 0.0,
        sl_balance: 0.0,
        lbsl_load: 0.0,
        sl_load: 0.0,
        steady_steps: 0,
    };
    for step in 0..cfg.steps {
        // One shared length stream for both arms keeps the comparison
        // paired.
        let batches: Vec<Vec<usize>> = (0..ranks)
            .map(|r| {
                let mut rr = rng::stream(cfg.seed, &[0x10ad, step as u64, r as u64]);
                (0..cfg.users_per_rank)
                    .map(|_| (pareto.sample(&mut rr) as usize).clamp(cfg.min_len, cfg.cap_len))
                    .collect()
            })
            .collect();

        let decisions = state.step(&batches)?;
        if state.step_count() <= cfg.lbsl.warmup_steps {
            continue;
        }
        let lbsl_loads: Vec<f64> =
            decisions.iter().map(|d| rank_load(&d.kept_lens, gamma)).collect();
        let sl_loads: Vec<f64> = batches
            .iter()
            .map(|lens| {
                let kept: Vec<usize> = lens.iter().map(|&n| n.min(ell)).collect();
                rank_load(&kept, gamma)
            })
            .collect();
        out.lbsl_balance += balance_ratio(&lbsl_loads)?;
        out.sl_balance += balance_ratio(&sl_loads)?;
        out.lbsl_load += lbsl_loads.iter().sum::<f64>() / ranks as f64;
        out.sl_load += sl_loads.iter().sum::<f64>() / ranks as f64;
        out.steady_steps += 1;
    }
    if out.steady_steps > 0 {
        let n = out.steady_steps as f64;
        out.lbsl_balance /= n;
        out.sl_balance /= n;
        out.lbsl_load /= n;
        out.sl_load /= n;
    }
    Ok(out)
}

/// Per-rank uniform length draw; exposed for spot checks of the stream.
pub fn draw_lengths(cfg: &SimConfig, step: usize, rank: usize) -> Vec<usize> {
    let pareto = Pareto::new(cfg.min_len as f64, cfg.shape).expect("positive shape");
    let mut rr = rng::stream(cfg.seed, &[0x10ad, step as u64, rank as u64]);
    (0..cfg.users_per_rank)
        .map(|_| (pareto.sample(&mut rr) as usize).clamp(cfg.min_len, cfg.cap_len))
        .collect()
}

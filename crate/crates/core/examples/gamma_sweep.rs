//! Measures how the simulator's planted-saliency amplitude drives recovery
//! and encoder/decoder consistency. The numbers printed here are the ones the
//! acceptance thresholds were checked against.
//!
//! cargo run --release --example gamma_sweep

use vtc_core::diagnostics::{consistency_from_scores, consistency_report};
use vtc_core::scoring::{encoder_ensemble_importance, random_importance, EnsembleFn};
use vtc_core::selection::top_u;
use vtc_core::sim::{simulate, SimConfig};

fn summary(xs: &[f64]) -> String {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    format!(
        "mean {m:.4} sd {sd:.4} min {:.4} p10 {:.4} median {:.4} max {:.4}",
        s[0],
        s[s.len() / 10],
        s[s.len() / 2],
        s[s.len() - 1]
    )
}

fn main() -> vtc_core::Result<()> {
    println!("# recovery of planted tokens by CLS ensemble (K=3, avg), N_v=32, S=4, U=4");
    for gamma in [1.0, 2.0, 4.0, 8.0] {
        let mut rates = Vec::new();
        let mut three_of_four = 0;
        for seed in 0..100 {
            let cfg = SimConfig { seed, n_visual: 32, planted: 4, gamma, ..SimConfig::default() };
            let out = simulate(&cfg)?;
            let s = encoder_ensemble_importance(&out.encoder_trace, 3, EnsembleFn::Avg)?;
            let sel = top_u(&s, 4)?;
            let hits = out.planted.iter().filter(|&&p| sel.contains(p)).count();
            if hits >= 3 {
                three_of_four += 1;
            }
            rates.push(hits as f64 / 4.0);
        }
        println!("gamma {gamma}: recovery {} | >=3/4 in {three_of_four}/100", summary(&rates));
    }

    println!("\n# consistency, N_v=32, S=8, U=8, K=3 avg (random baseline U/N_v = 0.25)");
    for gamma in [1.0, 2.0, 4.0, 8.0] {
        let mut overlaps = Vec::new();
        let mut rhos = Vec::new();
        for seed in 0..100 {
            let cfg = SimConfig { seed, n_visual: 32, planted: 8, gamma, ..SimConfig::default() };
            let out = simulate(&cfg)?;
            let r = consistency_report(&out.encoder_trace, &out.decoder_trace, &[8], 3, EnsembleFn::Avg)?;
            overlaps.push(r.aggregates.mean_overlap);
            rhos.push(r.aggregates.mean_spearman);
        }
        println!("gamma {gamma}: overlap {}", summary(&overlaps));
        println!("          spearman {}", summary(&rhos));
    }

    println!("\n# K=3 vs K=1 mean overlap, default dims, U=8, 100 seeds");
    for gamma in [1.5, 2.0, 4.0] {
        let mut wins = 0;
        let mut diffs = Vec::new();
        for seed in 0..100 {
            let cfg = SimConfig { seed, gamma, ..SimConfig::default() };
            let out = simulate(&cfg)?;
            let k1 = consistency_report(&out.encoder_trace, &out.decoder_trace, &[8], 1, EnsembleFn::Avg)?;
            let k3 = consistency_report(&out.encoder_trace, &out.decoder_trace, &[8], 3, EnsembleFn::Avg)?;
            if k3.aggregates.mean_overlap >= k1.aggregates.mean_overlap {
                wins += 1;
            }
            diffs.push(k3.aggregates.mean_overlap - k1.aggregates.mean_overlap);
        }
        println!("gamma {gamma}: K3 >= K1 in {wins}/100; diff {}", summary(&diffs));
    }

    println!("\n# null: gamma=1, S=0, N_v=32, U=8, 200 seeds");
    let mut sim_overlaps = Vec::new();
    let mut rand_overlaps = Vec::new();
    for seed in 0..200 {
        let cfg = SimConfig { seed, n_visual: 32, planted: 0, gamma: 1.0, ..SimConfig::default() };
        let out = simulate(&cfg)?;
        let r = consistency_report(&out.encoder_trace, &out.decoder_trace, &[8], 3, EnsembleFn::Avg)?;
        sim_overlaps.push(r.aggregates.mean_overlap);
        let rnd = random_importance(32, 10_000 + seed)?;
        let rr = consistency_from_scores(&rnd, &out.decoder_trace, &[8])?;
        rand_overlaps.push(rr.aggregates.mean_overlap);
    }
    println!("cls    {}", summary(&sim_overlaps));
    println!("random {}", summary(&rand_overlaps));
    Ok(())
}

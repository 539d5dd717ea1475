#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vtc_core::trace::AttentionTrace;

/// A row of `n` non-negative weights summing to at most one.
pub fn attention_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mass = rng.random_range(0.5..0.999);
    raw.iter().map(|v| (v / total * mass) as f32).collect()
}

pub fn random_encoder(rng: &mut ChaCha8Rng, layers: usize, heads: usize, nv: usize) -> AttentionTrace {
    let data = (0..layers * heads)
        .flat_map(|_| attention_row(rng, nv))
        .collect();
    AttentionTrace::encoder(layers, heads, nv, data).unwrap()
}

pub fn random_decoder(
    rng: &mut ChaCha8Rng,
    layers: usize,
    heads: usize,
    outputs: usize,
    nv: usize,
) -> AttentionTrace {
    let data = (0..layers * heads * outputs)
        .flat_map(|_| attention_row(rng, nv))
        .collect();
    AttentionTrace::decoder(layers, heads, outputs, nv, data).unwrap()
}

pub fn summary(xs: &[f64]) -> String {
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

//! Closed-form decoder-only prefill FLOPs and KV-cache size, before and after
//! visual-token pruning.
//!
//! Per layer over `n` tokens: `8·n·d²` for the four width-`d` projections,
//! `4·n²·d` for the score and context matmuls, and `4·n·d·m` for the two FFN
//! matrices. Vocabulary projection and the vision encoder are left out since
//! pruning does not change them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: u64,
    pub ffn: u64,
    pub layers: u64,
    pub n_text: u64,
    pub n_vis_full: u64,
    pub n_vis_kept: u64,
    /// Decoder layers run before pruning; 0 prunes ahead of the decoder.
    pub prune_layer: u64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ffn == 0 || self.layers == 0 {
            return Err(Error::InvalidInput(
                "hidden, ffn and layer counts must be positive".into(),
            ));
        }
        if self.n_vis_kept > self.n_vis_full {
            return Err(Error::InvalidInput(format!(
                "kept tokens {} exceed full visual tokens {}",
                self.n_vis_kept, self.n_vis_full
            )));
        }
        if self.prune_layer > self.layers {
            return Err(Error::InvalidInput(format!(
                "prune layer {} beyond {} decoder layers",
                self.prune_layer, self.layers
            )));
        }
        if self.n_text + self.n_vis_kept == 0 {
            return Err(Error::InvalidInput(
                "compressed sequence would be empty".into(),
            ));
        }
        Ok(())
    }

    fn full_tokens(&self) -> u64 {
        self.n_text + self.n_vis_full
    }

    fn kept_tokens(&self) -> u64 {
        self.n_text + self.n_vis_kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostPair {
    pub full: u64,
    pub compressed: u64,
    pub ratio: f64,
}

impl CostPair {
    fn new(full: u64, compressed: u64) -> Self {
        Self {
            full,
            compressed,
            ratio: compressed as f64 / full as f64,
        }
    }
}

fn overflow() -> Error {
    Error::InvalidInput("cost overflows u64".into())
}

/// FLOPs of one decoder layer over `n` tokens.
pub fn layer_flops(n: u64, hidden: u64, ffn: u64) -> Result<u64> {
    let proj = 8u64
        .checked_mul(n)
        .and_then(|v| v.checked_mul(hidden))
        .and_then(|v| v.checked_mul(hidden));
    let attn = 4u64
        .checked_mul(n)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(hidden));
    let mlp = 4u64
        .checked_mul(n)
        .and_then(|v| v.checked_mul(hidden))
        .and_then(|v| v.checked_mul(ffn));
    proj.zip(attn)
        .and_then(|(p, a)| p.checked_add(a))
        .zip(mlp)
        .and_then(|(pa, m)| pa.checked_add(m))
        .ok_or_else(overflow)
}

pub fn prefill_flops(dims: &ModelDims) -> Result<CostPair> {
    dims.validate()?;
    let full_layer = layer_flops(dims.full_tokens(), dims.hidden, dims.ffn)?;
    let kept_layer = layer_flops(dims.kept_tokens(), dims.hidden, dims.ffn)?;
    let full = full_layer.checked_mul(dims.layers).ok_or_else(overflow)?;
    let compressed = full_layer
        .checked_mul(dims.prune_layer)
        .zip(kept_layer.checked_mul(dims.layers - dims.prune_layer))
        .and_then(|(a, b)| a.checked_add(b))
        .ok_or_else(overflow)?;
    Ok(CostPair::new(full, compressed))
}

/// KV-cache element counts (keys plus values, every layer).
pub fn kv_memory(dims: &ModelDims) -> Result<CostPair> {
    dims.validate()?;
    let per_token = 2u64.checked_mul(dims.hidden).ok_or_else(overflow)?;
    let full_tokens = dims
        .layers
        .checked_mul(dims.full_tokens())
        .ok_or_else(overflow)?;
    let kept_tokens = dims
        .prune_layer
        .checked_mul(dims.full_tokens())
        .zip((dims.layers - dims.prune_layer).checked_mul(dims.kept_tokens()))
        .and_then(|(a, b)| a.checked_add(b))
        .ok_or_else(overflow)?;
    Ok(CostPair::new(
        full_tokens.checked_mul(per_token).ok_or_else(overflow)?,
        kept_tokens.checked_mul(per_token).ok_or_else(overflow)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub dims: ModelDims,
    pub prefill_flops: CostPair,
    pub kv_memory: CostPair,
    pub assumptions: Vec<&'static str>,
}

pub fn cost_report(dims: &ModelDims) -> Result<CostReport> {
    Ok(CostReport {
        dims: *dims,
        prefill_flops: prefill_flops(dims)?,
        kv_memory: kv_memory(dims)?,
        assumptions: vec![
            "decoder-only prefill",
            "per layer: 8*n*d^2 projections + 4*n^2*d attention + 4*n*d*m feed-forward",
            "vocabulary projection and vision encoder excluded",
            "kv memory counted in elements (keys and values, all layers)",
            "ratios only; wall-clock latency is not modelled",
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims(n_text: u64, full: u64, kept: u64, p: u64) -> ModelDims {
        ModelDims {
            hidden: 64,
            ffn: 256,
            layers: 2,
            n_text,
            n_vis_full: full,
            n_vis_kept: kept,
            prune_layer: p,
        }
    }

    #[test]
    fn identity_cases() {
        assert_eq!(prefill_flops(&dims(4, 16, 16, 0)).unwrap().ratio, 1.0);
        assert_eq!(prefill_flops(&dims(4, 16, 3, 2)).unwrap().ratio, 1.0);
        let kv = kv_memory(&dims(4, 16, 16, 0)).unwrap();
        assert_eq!(kv.full, kv.compressed);
    }

    #[test]
    fn hand_computed_ratio() {
        // cost(n) = 8n*64^2 + 4n^2*64 + 4n*64*256 = 98304n + 256n^2
        // cost(20) = 2_068_480, cost(12) = 1_216_512, ratio = 297/505
        let c = prefill_flops(&dims(4, 16, 8, 0)).unwrap();
        assert_eq!(c.full, 2 * 2_068_480);
        assert_eq!(c.compressed, 2 * 1_216_512);
        assert_eq!(c.ratio, 297.0 / 505.0);

        let deferred = prefill_flops(&dims(4, 16, 8, 1)).unwrap();
        assert_eq!(deferred.compressed, 2_068_480 + 1_216_512);
    }

    #[test]
    fn kv_proportional_without_text() {
        let kv = kv_memory(&dims(0, 16, 4, 0)).unwrap();
        assert_eq!(kv.ratio, 0.25);
    }

    #[test]
    fn llava_shape() {
        let d = ModelDims {
            hidden: 4096,
            ffn: 11008,
            layers: 32,
            n_text: 64,
            n_vis_full: 576,
            n_vis_kept: 128,
            prune_layer: 0,
        };
        let kv = kv_memory(&d).unwrap();
        assert_eq!(kv.ratio, 0.3);
        assert_eq!(kv.full, 2 * 32 * 640 * 4096);
        let report = cost_report(&d).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        assert!(v["prefill_flops"]["ratio"].as_f64().unwrap() < 0.35);
        assert!(v["assumptions"].is_array());
    }

    #[test]
    fn invalid_dims() {
        assert!(prefill_flops(&dims(4, 16, 17, 0)).is_err());
        assert!(prefill_flops(&dims(4, 16, 8, 3)).is_err());
        assert!(kv_memory(&dims(0, 16, 0, 0)).is_err());
        let mut d = dims(4, 16, 8, 0);
        d.hidden = u64::MAX / 2;
        assert!(prefill_flops(&d).is_err());
    }

    proptest! {
        #[test]
        fn ratio_bounds_and_monotonicity(
            layers in 1u64..40,
            n_text in 0u64..200,
            full in 1u64..700,
            kept_frac in 0.0f64..=1.0,
            p_frac in 0.0f64..=1.0,
        ) {
            let kept = ((full as f64 * kept_frac) as u64).max(1).min(full);
            let p = ((layers as f64 * p_frac) as u64).min(layers);
            let base = ModelDims { hidden: 128, ffn: 512, layers, n_text, n_vis_full: full, n_vis_kept: kept, prune_layer: p };
            let r = prefill_flops(&base).unwrap().ratio;
            prop_assert!(r > 0.0 && r <= 1.0);
            prop_assert_eq!(r == 1.0, kept == full || p == layers);
            if kept < full {
                let more = ModelDims { n_vis_kept: kept + 1, ..base };
                prop_assert!(prefill_flops(&more).unwrap().ratio >= r);
                prop_assert!(kv_memory(&more).unwrap().ratio >= kv_memory(&base).unwrap().ratio);
            }
            if p < layers {
                let later = ModelDims { prune_layer: p + 1, ..base };
                prop_assert!(prefill_flops(&later).unwrap().ratio >= r);
            }
        }
    }
}

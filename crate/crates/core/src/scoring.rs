//! Visual-token importance from CLS attention (encoder) and output-token
//! attention (decoder).
//!
//! Encoder layers are 0-indexed. The anchor layer is the penultimate one,
//! `L - 2`, and an ensemble of depth `K` covers layers `L-1-K ..= L-2`; the
//! final encoder layer never contributes.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ScoreVector;
use crate::trace::{AttentionTrace, TraceRole};

/// Default ensemble depth.
pub const DEFAULT_K: usize = 3;

/// Elementwise aggregation across encoder layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleFn {
    #[default]
    Avg,
    Max,
    Min,
}

impl EnsembleFn {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleFn::Avg => "avg",
            EnsembleFn::Max => "max",
            EnsembleFn::Min => "min",
        }
    }

    /// Folds equal-length per-layer vectors in the order given.
    pub fn aggregate(self, layers: &[Vec<f64>]) -> Vec<f64> {
        let mut acc = layers[0].clone();
        for layer in &layers[1..] {
            for (a, &v) in acc.iter_mut().zip(layer) {
                *a = match self {
                    EnsembleFn::Avg => *a + v,
                    EnsembleFn::Max => a.max(v),
                    EnsembleFn::Min => a.min(v),
                };
            }
        }
        if self == EnsembleFn::Avg {
            let k = layers.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
        }
        acc
    }
}

impl fmt::Display for EnsembleFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(EnsembleFn::Avg),
            "max" => Ok(EnsembleFn::Max),
            "min" => Ok(EnsembleFn::Min),
            other => Err(Error::InvalidInput(format!("unknown ensemble {other:?}"))),
        }
    }
}

/// Where a score vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreSource {
    EncoderSingleLayer { layer: usize },
    EncoderEnsemble { k: usize, ensemble: EnsembleFn },
    DecoderLayer { layer: usize },
    Random { seed: u64 },
}

impl ScoreSource {
    pub fn label(&self) -> String {
        match self {
            ScoreSource::EncoderSingleLayer { layer } => format!("encoder_layer_{layer}"),
            ScoreSource::EncoderEnsemble { k, ensemble } => format!("encoder_k{k}_{ensemble}"),
            ScoreSource::DecoderLayer { layer } => format!("decoder_layer_{layer}"),
            ScoreSource::Random { seed } => format!("random_{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceScore {
    #[serde(rename = "n_visual")]
    n_visual: usize,
    source: ScoreSource,
    scores: ScoreVector,
}

#[derive(Deserialize)]
struct RawScore {
    n_visual: usize,
    source: ScoreSource,
    scores: ScoreVector,
}

impl<'de> Deserialize<'de> for ImportanceScore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawScore::deserialize(d)?;
        ImportanceScore::new(raw.scores, raw.source)
            .and_then(|s| {
                if s.n_visual == raw.n_visual {
                    Ok(s)
                } else {
                    Err(Error::InvalidInput(format!(
                        "n_visual {} disagrees with {} scores",
                        raw.n_visual, s.n_visual
                    )))
                }
            })
            .map_err(serde::de::Error::custom)
    }
}

impl ImportanceScore {
    /// Wraps a score vector. Scores must be non-negative.
    pub fn new(scores: ScoreVector, source: ScoreSource) -> Result<Self> {
        if let Some(i) = scores.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "negative importance {} at index {i}",
                scores[i]
            )));
        }
        Ok(Self {
            n_visual: scores.len(),
            source,
            scores,
        })
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn source(&self) -> &ScoreSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.n_visual
    }

    pub fn is_empty(&self) -> bool {
        self.n_visual == 0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("score serialisation is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("score json: {e}")))
    }
}

fn head_mean(trace: &AttentionTrace, layer: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; trace.num_visual_tokens()];
    let mut rows = 0usize;
    for row in trace.layer_rows(layer) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
        rows += 1;
    }
    let denom = rows as f64;
    acc.iter_mut().for_each(|a| *a /= denom);
    acc
}

fn check_layer(trace: &AttentionTrace, layer: usize) -> Result<()> {
    if layer >= trace.num_layers() {
        return Err(Error::InvalidLayer {
            layer,
            num_layers: trace.num_layers(),
        });
    }
    Ok(())
}

fn finish(values: Vec<f64>, source: ScoreSource) -> Result<ImportanceScore> {
    ImportanceScore::new(ScoreVector::new(values)?, source)
}

/// Head-averaged CLS attention at one encoder layer.
pub fn encoder_layer_importance(trace: &AttentionTrace, layer: usize) -> Result<ImportanceScore> {
    trace.require_role(TraceRole::Encoder)?;
    check_layer(trace, layer)?;
    finish(head_mean(trace, layer), ScoreSource::EncoderSingleLayer { layer })
}

/// Layers aggregated by an ensemble of depth `k`, oldest first.
pub fn ensemble_layers(num_layers: usize, k: usize) -> Result<std::ops::RangeInclusive<usize>> {
    if num_layers < 2 {
        return Err(Error::InvalidTrace(format!(
            "ensembling needs at least 2 encoder layers, trace has {num_layers}"
        )));
    }
    let max = num_layers - 1;
    if k == 0 || k > max {
        return Err(Error::InvalidK { k, max });
    }
    Ok(num_layers - 1 - k..=num_layers - 2)
}

/// Per-layer CLS importance aggregated over the `k` layers ending at the
/// penultimate layer.
pub fn encoder_ensemble_importance(
    trace: &AttentionTrace,
    k: usize,
    ensemble: EnsembleFn,
) -> Result<ImportanceScore> {
    trace.require_role(TraceRole::Encoder)?;
    let layers: Vec<Vec<f64>> = ensemble_layers(trace.num_layers(), k)?
        .map(|m| head_mean(trace, m))
        .collect();
    finish(
        ensemble.aggregate(&layers),
        ScoreSource::EncoderEnsemble { k, ensemble },
    )
}

/// Output-token attention averaged over heads and output tokens.
pub fn decoder_layer_importance(trace: &AttentionTrace, layer: usize) -> Result<ImportanceScore> {
    trace.require_role(TraceRole::Decoder)?;
    if trace.num_output_tokens() == 0 {
        return Err(Error::NoOutputTokens);
    }
    check_layer(trace, layer)?;
    finish(head_mean(trace, layer), ScoreSource::DecoderLayer { layer })
}

/// I.i.d. uniform `[0, 1)` scores from a ChaCha8 stream keyed by `seed`.
///
/// Element `i` is always the `i`-th 64-bit word pair of the stream, so the
/// value at an index does not depend on how many other values are drawn.
pub fn random_importance(n_visual: usize, seed: u64) -> Result<ImportanceScore> {
    if n_visual == 0 {
        return Err(Error::InvalidInput("random scores need n_visual >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n_visual).map(|_| rng.random::<f64>()).collect();
    finish(values, ScoreSource::Random { seed })
}

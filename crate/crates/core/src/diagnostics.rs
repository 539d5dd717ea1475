//! Encoder/decoder importance consistency: top-U overlap and Spearman rank
//! correlation per decoder layer, plus sweeps over the ensemble depth.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numeric::{descending_ranks, mean, pearson};
use crate::scoring::{
    decoder_layer_importance, encoder_ensemble_importance, random_importance, EnsembleFn,
    ImportanceScore,
};
use crate::selection::{top_u, TokenSelection};
use crate::trace::{AttentionTrace, TraceRole};

/// Fraction of `a`'s kept tokens that `b` also keeps.
///
/// Both selections must share budget and token count. The denominator is the
/// kept-set size, which is `U` whenever `U <= N_v`.
pub fn overlap_proportion(a: &TokenSelection, b: &TokenSelection) -> Result<f64> {
    if a.budget() != b.budget() {
        return Err(Error::InvalidComparison(format!(
            "budgets differ: {} vs {}",
            a.budget(),
            b.budget()
        )));
    }
    if a.n_visual() != b.n_visual() {
        return Err(Error::InvalidComparison(format!(
            "token counts differ: {} vs {}",
            a.n_visual(),
            b.n_visual()
        )));
    }
    // both index lists are sorted: merge-count the intersection
    let (x, y) = (a.kept(), b.kept());
    let (mut i, mut j, mut shared) = (0, 0, 0usize);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                shared += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(shared as f64 / x.len() as f64)
}

/// Spearman's rho as Pearson correlation of average-tie descending ranks.
pub fn spearman(a: &ImportanceScore, b: &ImportanceScore) -> Result<f64> {
    spearman_values(a.scores(), b.scores())
}

pub(crate) fn spearman_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "score lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    pearson(&descending_ranks(a), &descending_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetOverlap {
    pub budget: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerConsistency {
    /// 0-based decoder layer.
    pub n: usize,
    pub spearman: f64,
    pub overlaps: Vec<BudgetOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub budgets: Vec<usize>,
    pub k: Option<usize>,
    pub ensemble: Option<EnsembleFn>,
    pub encoder_source: String,
    pub decoder_source: String,
    pub n_visual: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    /// Mean over layers and budgets.
    pub mean_overlap: f64,
    pub mean_spearman: f64,
    /// Mean over layers, one entry per budget.
    pub per_budget: Vec<BudgetOverlap>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub config: ReportConfig,
    pub per_layer: Vec<LayerConsistency>,
    pub aggregates: Aggregates,
}

fn check_budgets(budgets: &[usize]) -> Result<()> {
    if budgets.is_empty() {
        return Err(Error::InvalidInput("no budgets given".into()));
    }
    if budgets.contains(&0) {
        return Err(Error::InvalidBudget);
    }
    Ok(())
}

fn check_pair(enc: &AttentionTrace, dec: &AttentionTrace) -> Result<()> {
    enc.require_role(TraceRole::Encoder)?;
    dec.require_role(TraceRole::Decoder)?;
    if enc.num_visual_tokens() != dec.num_visual_tokens() {
        return Err(Error::TraceMismatch(format!(
            "encoder has {} visual tokens, decoder has {}",
            enc.num_visual_tokens(),
            dec.num_visual_tokens()
        )));
    }
    Ok(())
}

/// Compares a fixed encoder-side score vector with every decoder layer.
///
/// Layers are evaluated in parallel; each layer's numbers depend only on that
/// layer, so the result matches serial evaluation bit for bit.
pub fn consistency_from_scores(
    encoder_scores: &ImportanceScore,
    dec: &AttentionTrace,
    budgets: &[usize],
) -> Result<ConsistencyReport> {
    dec.require_role(TraceRole::Decoder)?;
    check_budgets(budgets)?;
    if encoder_scores.len() != dec.num_visual_tokens() {
        return Err(Error::TraceMismatch(format!(
            "encoder scores cover {} tokens, decoder has {}",
            encoder_scores.len(),
            dec.num_visual_tokens()
        )));
    }
    let encoder_sel: Vec<TokenSelection> = budgets
        .iter()
        .map(|&u| top_u(encoder_scores, u))
        .collect::<Result<_>>()?;

    let per_layer: Vec<LayerConsistency> = (0..dec.num_layers())
        .into_par_iter()
        .map(|n| {
            let layer_scores = decoder_layer_importance(dec, n)?;
            let rho = spearman(encoder_scores, &layer_scores)?;
            let overlaps = budgets
                .iter()
                .zip(&encoder_sel)
                .map(|(&budget, enc_sel)| {
                    let dec_sel = top_u(&layer_scores, budget)?;
                    Ok(BudgetOverlap {
                        budget,
                        overlap: overlap_proportion(enc_sel, &dec_sel)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerConsistency {
                n,
                spearman: rho,
                overlaps,
            })
        })
        .collect::<Result<_>>()?;

    let aggregates = aggregate(&per_layer, budgets);
    Ok(ConsistencyReport {
        config: ReportConfig {
            budgets: budgets.to_vec(),
            k: None,
            ensemble: None,
            encoder_source: encoder_scores.source().label(),
            decoder_source: "decoder_layers".into(),
            n_visual: dec.num_visual_tokens(),
        },
        per_layer,
        aggregates,
    })
}

fn aggregate(per_layer: &[LayerConsistency], budgets: &[usize]) -> Aggregates {
    let all: Vec<f64> = per_layer
        .iter()
        .flat_map(|l| l.overlaps.iter().map(|o| o.overlap))
        .collect();
    let rhos: Vec<f64> = per_layer.iter().map(|l| l.spearman).collect();
    let per_budget = budgets
        .iter()
        .enumerate()
        .map(|(b, &budget)| {
            let vals: Vec<f64> = per_layer.iter().map(|l| l.overlaps[b].overlap).collect();
            BudgetOverlap {
                budget,
                overlap: mean(&vals).unwrap_or(f64::NAN),
            }
        })
        .collect();
    Aggregates {
        mean_overlap: mean(&all).unwrap_or(f64::NAN),
        mean_spearman: mean(&rhos).unwrap_or(f64::NAN),
        per_budget,
    }
}

/// Per-layer overlap and Spearman between the encoder's depth-`k` CLS
/// ensemble and each decoder layer.
pub fn consistency_report(
    enc: &AttentionTrace,
    dec: &AttentionTrace,
    budgets: &[usize],
    k: usize,
    ensemble: EnsembleFn,
) -> Result<ConsistencyReport> {
    check_pair(enc, dec)?;
    let scores = encoder_ensemble_importance(enc, k, ensemble)?;
    let mut report = consistency_from_scores(&scores, dec, budgets)?;
    report.config.k = Some(k);
    report.config.ensemble = Some(ensemble);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KSweepRow {
    pub k: usize,
    pub mean_overlap: f64,
    pub mean_spearman: f64,
}

/// One aggregate row per `k`, ascending.
pub fn k_sweep(
    enc: &AttentionTrace,
    dec: &AttentionTrace,
    budgets: &[usize],
    k_range: std::ops::RangeInclusive<usize>,
    ensemble: EnsembleFn,
) -> Result<Vec<KSweepRow>> {
    check_pair(enc, dec)?;
    check_budgets(budgets)?;
    let max = enc.num_layers().saturating_sub(1);
    if k_range.is_empty() || *k_range.start() == 0 || *k_range.end() > max {
        return Err(Error::InvalidK {
            k: if *k_range.start() == 0 { 0 } else { *k_range.end() },
            max,
        });
    }
    k_range
        .map(|k| {
            let r = consistency_report(enc, dec, budgets, k, ensemble)?;
            Ok(KSweepRow {
                k,
                mean_overlap: r.aggregates.mean_overlap,
                mean_spearman: r.aggregates.mean_spearman,
            })
        })
        .collect()
}

/// Mean overlap between random selections (seeds `seeds`) and `reference`.
pub fn random_overlap_baseline(
    reference: &TokenSelection,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<f64> {
    let overlaps: Vec<f64> = seeds
        .into_iter()
        .map(|seed| {
            let scores = random_importance(reference.n_visual(), seed)?;
            overlap_proportion(&top_u(&scores, reference.budget())?, reference)
        })
        .collect::<Result<_>>()?;
    mean(&overlaps).ok_or_else(|| Error::InvalidInput("no seeds given".into()))
}

impl ConsistencyReport {
    /// CSV with one row per (layer, budget): `layer,n,U,overlap,spearman`.
    /// `layer` is 1-based, `n` is the 0-based index.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["layer", "n", "U", "overlap", "spearman"])
            .map_err(csv_err)?;
        for layer in &self.per_layer {
            for o in &layer.overlaps {
                w.write_record([
                    (layer.n + 1).to_string(),
                    layer.n.to_string(),
                    o.budget.to_string(),
                    format!("{:.6}", o.overlap),
                    format!("{:.6}", layer.spearman),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

//! A deterministic toy vision encoder plus causal decoder that emits attention
//! traces with optional planted saliency.
//!
//! Token features are `s·(a·μ + z)` for a shared unit direction `μ` and
//! isotropic noise `z`. Planted tokens are multiplied by `γ`. Query and key
//! projections share weights in every head, so a query with a positive `μ`
//! component scores a token higher the larger that token's `μ` component.
//! Both the CLS token and the decoder's output queries carry such a
//! component, which is what couples encoder and decoder importance.
//!
//! All randomness comes from ChaCha8 streams keyed by `(seed, stream id)`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax_in_place;
use crate::selection::{PruneLocation, PrunePlan};
use crate::trace::AttentionTrace;

const STREAM_DIRECTION: u64 = 1;
const STREAM_TOKENS: u64 = 2;
const STREAM_CLS: u64 = 3;
const STREAM_OUTPUTS: u64 = 4;
const STREAM_PLANTED: u64 = 5;
const STREAM_ENCODER: u64 = 1 << 16;
const STREAM_DECODER: u64 = 2 << 16;

/// Overall feature magnitude.
const FEATURE_SCALE: f64 = 4.0;
/// Weight of the shared direction in token, CLS and query features.
const SHARED_COMPONENT: f64 = 1.25;
/// Residual branch multiplier.
const RESIDUAL_SCALE: f64 = 0.5;
/// Amplitude of the decoder's sinusoidal position embedding.
const POSITION_AMPLITUDE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_visual: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub output_tokens: usize,
    /// Number of planted salient tokens.
    pub planted: usize,
    /// Feature-scale multiplier for planted tokens.
    pub gamma: f64,
    /// Give kept visual tokens compacted position ids (0..U) instead of their
    /// original ones when pruning ahead of the decoder.
    #[serde(default)]
    pub recompact_positions: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_visual: 32,
            width: 64,
            heads: 4,
            enc_layers: 6,
            dec_layers: 4,
            output_tokens: 8,
            planted: 8,
            gamma: 4.0,
            recompact_positions: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_visual == 0
            || self.width == 0
            || self.heads == 0
            || self.dec_layers == 0
            || self.output_tokens == 0
        {
            return bad("token, width, head, layer and output counts must be positive".into());
        }
        if self.enc_layers < 2 {
            return bad(format!("need at least 2 encoder layers, got {}", self.enc_layers));
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            ));
        }
        if self.planted > self.n_visual {
            return bad(format!(
                "{} planted tokens exceed {} visual tokens",
                self.planted, self.n_visual
            ));
        }
        if !self.gamma.is_finite() || self.gamma < 1.0 {
            return bad(format!("gamma must be finite and >= 1, got {}", self.gamma));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub encoder_trace: AttentionTrace,
    pub decoder_trace: AttentionTrace,
    /// Planted token indices, ascending.
    pub planted: Vec<usize>,
}

/// Decoder traces from a pruned run.
///
/// Layers before the prune point see every visual token and land in
/// `full_segment`; the remaining layers see only kept tokens and land in
/// `pruned_segment`. Either segment is absent when it would have no layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSimOutput {
    pub encoder_trace: AttentionTrace,
    pub full_segment: Option<AttentionTrace>,
    pub pruned_segment: Option<AttentionTrace>,
    pub planted: Vec<usize>,
    pub plan: PrunePlan,
}

impl PrunedSimOutput {
    pub fn dec_layers(&self) -> usize {
        self.full_segment.as_ref().map_or(0, |t| t.num_layers())
            + self.pruned_segment.as_ref().map_or(0, |t| t.num_layers())
    }

    /// Length of the recorded output rows at decoder layer `layer`.
    pub fn decoder_row_len(&self, layer: usize) -> Option<usize> {
        let full = self.full_segment.as_ref().map_or(0, |t| t.num_layers());
        if layer < full {
            self.full_segment.as_ref().map(|t| t.num_visual_tokens())
        } else if layer < self.dec_layers() {
            self.pruned_segment.as_ref().map(|t| t.num_visual_tokens())
        } else {
            None
        }
    }
}

/// Sidecar metadata written next to simulated traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub planted: Vec<usize>,
    pub config: SimConfig,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

struct Layer {
    /// Shared query/key projection per head, `width x head_dim`.
    qk: Vec<Array2<f64>>,
}

impl Layer {
    fn draw(seed: u64, id: u64, cfg: &SimConfig) -> Self {
        let mut rng = stream(seed, id);
        let std = 1.0 / (cfg.width as f64).sqrt();
        let hd = cfg.head_dim();
        let qk = (0..cfg.heads)
            .map(|_| gaussian(&mut rng, cfg.width, hd, std))
            .collect();
        Self { qk }
    }

    /// One attention block with residual update. Values are the token
    /// features themselves and heads are averaged, so the shared direction
    /// survives the residual stream. `causal` restricts row `i` to columns
    /// `0..=i`. `record` gets `(head, row, probs)` for rows in
    /// `rows_of_interest`.
    fn forward(
        &self,
        x: &mut Array2<f64>,
        causal: bool,
        rows_of_interest: std::ops::Range<usize>,
        mut record: impl FnMut(usize, usize, &[f64]),
    ) {
        let n = x.nrows();
        let hd = self.qk[0].ncols();
        let scale = 1.0 / (hd as f64).sqrt();
        let head_weight = 1.0 / self.qk.len() as f64;
        let mut mix = Array2::<f64>::zeros((n, n));
        let mut probs = vec![0.0f64; n];
        let queries = query_normalised(x);
        for (h, wqk) in self.qk.iter().enumerate() {
            let keys = x.dot(wqk);
            let logits = queries.dot(wqk).dot(&keys.t());
            for i in 0..n {
                let width = if causal { i + 1 } else { n };
                let row = &mut probs[..width];
                for (j, p) in row.iter_mut().enumerate() {
                    *p = logits[[i, j]] * scale;
                }
                softmax_in_place(row);
                if rows_of_interest.contains(&i) {
                    record(h, i, row);
                }
                for (j, &p) in row.iter().enumerate() {
                    mix[[i, j]] += head_weight * p;
                }
            }
        }
        let update = mix.dot(&*x);
        x.scaled_add(RESIDUAL_SCALE, &update);
    }
}

/// Rescales every row to the norm of an unplanted input feature, so that the
/// key's norm, not the query's, sets the logit scale.
fn query_normalised(x: &Array2<f64>) -> Array2<f64> {
    let target = FEATURE_SCALE * (SHARED_COMPONENT * SHARED_COMPONENT + 1.0).sqrt();
    let mut q = x.clone();
    for mut row in q.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row *= target / norm;
        }
    }
    q
}

struct World {
    tokens: Array2<f64>,
    cls: Array1<f64>,
    outputs: Array2<f64>,
    planted: Vec<usize>,
}

fn features(rng: &mut ChaCha8Rng, rows: usize, direction: &Array1<f64>) -> Array2<f64> {
    let d = direction.len();
    let mut f = gaussian(rng, rows, d, 1.0);
    for mut row in f.rows_mut() {
        // unit-norm noise orthogonal to the shared direction
        let along = row.dot(direction);
        row.scaled_add(-along, direction);
        let norm = row.dot(&row).sqrt();
        row /= norm;
        row.scaled_add(SHARED_COMPONENT, direction);
    }
    f *= FEATURE_SCALE;
    f
}

impl World {
    fn draw(cfg: &SimConfig) -> Self {
        let d = cfg.width;
        let mut rng = stream(cfg.seed, STREAM_DIRECTION);
        let raw = Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal));
        let direction = &raw / raw.dot(&raw).sqrt();

        let mut tokens = features(&mut stream(cfg.seed, STREAM_TOKENS), cfg.n_visual, &direction);
        let cls = features(&mut stream(cfg.seed, STREAM_CLS), 1, &direction).row(0).to_owned();
        let outputs = features(
            &mut stream(cfg.seed, STREAM_OUTPUTS),
            cfg.output_tokens,
            &direction,
        );

        let mut planted = index::sample(
            &mut stream(cfg.seed, STREAM_PLANTED),
            cfg.n_visual,
            cfg.planted,
        )
        .into_vec();
        planted.sort_unstable();
        for &u in &planted {
            tokens.row_mut(u).mapv_inplace(|v| v * cfg.gamma);
        }
        Self {
            tokens,
            cls,
            outputs,
            planted,
        }
    }
}

fn position_embedding(pos: usize, width: usize) -> Array1<f64> {
    Array1::from_shape_fn(width, |i| {
        let freq = 1.0 / 10_000f64.powf((i / 2 * 2) as f64 / width as f64);
        let angle = pos as f64 * freq;
        POSITION_AMPLITUDE * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Runs the encoder; returns the CLS trace and final visual features.
fn run_encoder(cfg: &SimConfig, world: &World) -> Result<(AttentionTrace, Array2<f64>)> {
    let n = cfg.n_visual;
    let mut x = Array2::<f64>::zeros((n + 1, cfg.width));
    x.row_mut(0).assign(&world.cls);
    x.slice_mut(s![1.., ..]).assign(&world.tokens);

    let mut data = vec![0.0f32; cfg.enc_layers * cfg.heads * n];
    for m in 0..cfg.enc_layers {
        let layer = Layer::draw(cfg.seed, STREAM_ENCODER + m as u64, cfg);
        layer.forward(&mut x, false, 0..1, |h, _, probs| {
            let start = (m * cfg.heads + h) * n;
            for (dst, &p) in data[start..start + n].iter_mut().zip(&probs[1..]) {
                *dst = p as f32;
            }
        });
    }
    let trace = AttentionTrace::encoder(cfg.enc_layers, cfg.heads, n, data)?;
    let visual = x.slice(s![1.., ..]).to_owned();
    Ok((trace, visual))
}

/// Decoder state: visual prefix followed by output queries.
struct DecoderRun<'a> {
    cfg: &'a SimConfig,
    x: Array2<f64>,
    n_visual: usize,
}

impl<'a> DecoderRun<'a> {
    fn new(
        cfg: &'a SimConfig,
        world: &World,
        visual: ArrayView2<f64>,
        visual_positions: &[usize],
    ) -> Self {
        let nv = visual.nrows();
        let mut x = Array2::<f64>::zeros((nv + cfg.output_tokens, cfg.width));
        for (i, &pos) in visual_positions.iter().enumerate() {
            let row = &visual.row(i) + &position_embedding(pos, cfg.width);
            x.row_mut(i).assign(&row);
        }
        let first_output = if cfg.recompact_positions { nv } else { cfg.n_visual };
        for k in 0..cfg.output_tokens {
            let row = &world.outputs.row(k) + &position_embedding(first_output + k, cfg.width);
            x.row_mut(nv + k).assign(&row);
        }
        Self { cfg, x, n_visual: nv }
    }

    /// Runs decoder layers `layers`, returning their output-row trace.
    fn run(&mut self, layers: std::ops::Range<usize>) -> Result<Option<AttentionTrace>> {
        if layers.is_empty() {
            return Ok(None);
        }
        let (h_count, o, nv) = (self.cfg.heads, self.cfg.output_tokens, self.n_visual);
        let mut data = vec![0.0f32; layers.len() * h_count * o * nv];
        for (local, n) in layers.clone().enumerate() {
            let layer = Layer::draw(self.cfg.seed, STREAM_DECODER + n as u64, self.cfg);
            let total = self.x.nrows();
            layer.forward(&mut self.x, true, nv..total, |h, i, probs| {
                let k = i - nv;
                let start = ((local * h_count + h) * o + k) * nv;
                for (dst, &p) in data[start..start + nv].iter_mut().zip(&probs[..nv]) {
                    *dst = p as f32;
                }
            });
        }
        Ok(Some(AttentionTrace::decoder(
            layers.len(),
            h_count,
            o,
            nv,
            data,
        )?))
    }

    /// Drops visual rows not in `kept` (indices into the current prefix).
    fn prune(&mut self, kept: &[usize]) {
        let mut rows: Vec<usize> = kept.to_vec();
        rows.extend(self.n_visual..self.x.nrows());
        self.x = self.x.select(Axis(0), &rows);
        self.n_visual = kept.len();
    }
}

/// Simulates one image/prompt pair end to end.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let world = World::draw(cfg);
    let (encoder_trace, visual) = run_encoder(cfg, &world)?;
    let positions: Vec<usize> = (0..cfg.n_visual).collect();
    let mut dec = DecoderRun::new(cfg, &world, visual.view(), &positions);
    let decoder_trace = dec
        .run(0..cfg.dec_layers)?
        .expect("dec_layers is positive");
    Ok(SimOutput {
        encoder_trace,
        decoder_trace,
        planted: world.planted,
    })
}

/// Like [`simulate`], but the decoder only sees kept visual tokens from the
/// plan's prune point on.
pub fn simulate_with_pruning(cfg: &SimConfig, plan: &PrunePlan) -> Result<PrunedSimOutput> {
    cfg.validate()?;
    let sel = plan.selection();
    if sel.n_visual() != cfg.n_visual {
        return Err(Error::InvalidConfig(format!(
            "plan covers {} tokens, config has {}",
            sel.n_visual(),
            cfg.n_visual
        )));
    }
    let world = World::draw(cfg);
    let (encoder_trace, visual) = run_encoder(cfg, &world)?;

    let (full_segment, pruned_segment) = match plan.location() {
        PruneLocation::BeforeLlm => {
            let kept_visual = visual.select(Axis(0), sel.kept());
            let positions: Vec<usize> = if cfg.recompact_positions {
                (0..sel.len()).collect()
            } else {
                sel.kept().to_vec()
            };
            let mut dec = DecoderRun::new(cfg, &world, kept_visual.view(), &positions);
            (None, dec.run(0..cfg.dec_layers)?)
        }
        PruneLocation::AfterLlmLayer { layer } => {
            if layer > cfg.dec_layers {
                return Err(Error::InvalidConfig(format!(
                    "prune layer {layer} beyond {} decoder layers",
                    cfg.dec_layers
                )));
            }
            let positions: Vec<usize> = (0..cfg.n_visual).collect();
            let mut dec = DecoderRun::new(cfg, &world, visual.view(), &positions);
            let full = dec.run(0..layer)?;
            dec.prune(sel.kept());
            (full, dec.run(layer..cfg.dec_layers)?)
        }
    };

    Ok(PrunedSimOutput {
        encoder_trace,
        full_segment,
        pruned_segment,
        planted: world.planted,
        plan: plan.clone(),
    })
}

impl SimOutput {
    pub fn sidecar(&self, cfg: &SimConfig) -> Sidecar {
        Sidecar {
            planted: self.planted.clone(),
            config: cfg.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::{encoder_ensemble_importance, encoder_layer_importance, EnsembleFn};
    use crate::selection::{make_prune_plan, top_u, TokenSelection};
    use crate::trace::to_bytes;

    fn small() -> SimConfig {
        SimConfig {
            seed: 3,
            n_visual: 12,
            width: 16,
            heads: 2,
            enc_layers: 3,
            dec_layers: 4,
            output_tokens: 3,
            planted: 2,
            gamma: 4.0,
            recompact_positions: false,
        }
    }

    #[test]
    fn config_validation() {
        let ok = small();
        assert!(ok.validate().is_ok());
        for bad in [
            SimConfig { heads: 3, ..ok.clone() },
            SimConfig { planted: 13, ..ok.clone() },
            SimConfig { enc_layers: 1, ..ok.clone() },
            SimConfig { n_visual: 0, planted: 0, ..ok.clone() },
            SimConfig { output_tokens: 0, ..ok.clone() },
            SimConfig { gamma: 0.5, ..ok.clone() },
            SimConfig { gamma: f64::NAN, ..ok.clone() },
        ] {
            assert!(matches!(simulate(&bad), Err(Error::InvalidConfig(_))), "{bad:?}");
        }
    }

    #[test]
    fn shapes_and_row_sums() {
        let cfg = small();
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.encoder_trace.num_layers(), 3);
        assert_eq!(out.encoder_trace.num_visual_tokens(), 12);
        assert_eq!(out.decoder_trace.num_layers(), 4);
        assert_eq!(out.decoder_trace.num_output_tokens(), 3);
        assert_eq!(out.planted.len(), 2);
        for t in [&out.encoder_trace, &out.decoder_trace] {
            for row in t.data().chunks(12) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!(s <= 1.0 + 1e-5 && s > 0.0);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(to_bytes(&a.encoder_trace), to_bytes(&b.encoder_trace));
        assert_eq!(to_bytes(&a.decoder_trace), to_bytes(&b.decoder_trace));
        let c = simulate(&SimConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.encoder_trace, c.encoder_trace);
    }

    #[test]
    fn planted_tokens_draw_cls_attention() {
        let cfg = SimConfig { gamma: 8.0, ..small() };
        let out = simulate(&cfg).unwrap();
        let s = encoder_layer_importance(&out.encoder_trace, 1).unwrap();
        let sel = top_u(&s, 2).unwrap();
        assert!(out.planted.iter().any(|&p| sel.contains(p)));
    }

    #[test]
    fn keep_all_plan_reproduces_decoder() {
        let cfg = small();
        let base = simulate(&cfg).unwrap();
        let all = TokenSelection::all(cfg.n_visual).unwrap();
        let plan = PrunePlan::new(all, PruneLocation::BeforeLlm).unwrap();
        let pruned = simulate_with_pruning(&cfg, &plan).unwrap();
        assert_eq!(pruned.pruned_segment.as_ref(), Some(&base.decoder_trace));
        assert!(pruned.full_segment.is_none());
        assert_eq!(pruned.encoder_trace, base.encoder_trace);

        let recompacted = SimConfig { recompact_positions: true, ..cfg };
        let plan = PrunePlan::new(TokenSelection::all(12).unwrap(), PruneLocation::BeforeLlm).unwrap();
        let again = simulate_with_pruning(&recompacted, &plan).unwrap();
        assert_eq!(again.pruned_segment.as_ref(), Some(&base.decoder_trace));
    }

    #[test]
    fn pruning_shapes() {
        let cfg = small();
        let base = simulate(&cfg).unwrap();
        let scores = encoder_ensemble_importance(&base.encoder_trace, 2, EnsembleFn::Avg).unwrap();

        let before = make_prune_plan(&scores, 6, PruneLocation::BeforeLlm).unwrap();
        let out = simulate_with_pruning(&cfg, &before).unwrap();
        assert_eq!(out.pruned_segment.as_ref().unwrap().num_visual_tokens(), 6);
        assert_eq!(out.dec_layers(), 4);

        let after = make_prune_plan(&scores, 6, PruneLocation::AfterLlmLayer { layer: 2 }).unwrap();
        let out = simulate_with_pruning(&cfg, &after).unwrap();
        assert_eq!(out.decoder_row_len(0), Some(12));
        assert_eq!(out.decoder_row_len(1), Some(12));
        assert_eq!(out.decoder_row_len(2), Some(6));
        assert_eq!(out.decoder_row_len(3), Some(6));
        assert_eq!(out.decoder_row_len(4), None);
        // the pre-prune layers match the unpruned run
        let full = out.full_segment.as_ref().unwrap();
        let n = full.data().len();
        assert_eq!(full.data(), &base.decoder_trace.data()[..n]);

        let last = make_prune_plan(&scores, 6, PruneLocation::AfterLlmLayer { layer: 4 }).unwrap();
        let out = simulate_with_pruning(&cfg, &last).unwrap();
        assert_eq!(out.full_segment.as_ref(), Some(&base.decoder_trace));
        assert!(out.pruned_segment.is_none());

        let beyond = make_prune_plan(&scores, 6, PruneLocation::AfterLlmLayer { layer: 5 }).unwrap();
        assert!(matches!(
            simulate_with_pruning(&cfg, &beyond),
            Err(Error::InvalidConfig(_))
        ));

        let other = make_prune_plan(
            &crate::scoring::random_importance(10, 1).unwrap(),
            4,
            PruneLocation::BeforeLlm,
        )
        .unwrap();
        assert!(simulate_with_pruning(&cfg, &other).is_err());
    }

    #[test]
    fn sidecar_json() {
        let cfg = small();
        let out = simulate(&cfg).unwrap();
        let v = serde_json::to_value(out.sidecar(&cfg)).unwrap();
        assert_eq!(v["planted"].as_array().unwrap().len(), 2);
        assert_eq!(v["config"]["n_visual"], 12);
    }
}

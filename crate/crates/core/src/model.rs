//! Deterministic pre-norm toy transformer used as the measurement substrate.
//!
//! Architecture per layer (RMS-norm, unit gains, eps 1e-6):
//!
//! ```text
//! a   = Attn(norm(h))        -> attention_output tap (after output projection)
//! h  += a
//! m   = Mlp(norm(h))         -> gate_pre_activation tap (SwiGLU), mlp_output tap
//! h  += m
//! h[t, i] += g for each spike (layer, i, t)
//!                            -> hidden_state tap
//! ```
//!
//! The embedding output is tapped before layer 0 and `norm(h)` after the last
//! layer is the final-norm tap. MLP taps are the block output before the
//! residual add.
//!
//! Weights are drawn from N(0, 0.02²) with a ChaCha8 generator seeded by
//! `seed`, in this order: token embedding `[vocab × d]`; then for each layer
//! `Wq, Wk, Wv, Wo` (`[d × d]` each) followed by the MLP block. Dense:
//! `W_in [d × w], W_out [w × d]`; SwiGLU: `W_gate [d × w], W_up [d × w],
//! W_down [w × d]`; MoE: router `[d × E]`, then each expert's matrices at width
//! `w / E` in expert order; finally the unembedding `[d × vocab]`. Matrices are
//! filled row-major. Norm gains are 1 and are not drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ActivationRecord, ComponentClass, TapLocation};

const INIT_STD: f32 = 0.02;
const NORM_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    Dense,
    #[serde(rename = "swiglu")]
    SwiGlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
}

/// Adds `gain` to residual coordinate `(token_index, dim)` right after the
/// MLP residual update of `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSpec {
    pub layer: usize,
    pub dim: usize,
    pub token_index: usize,
    pub gain: f64,
}

fn default_model_id() -> String {
    "toy".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mlp_kind: MlpKind,
    /// Total MLP width; defaults to `4 × hidden_dim`. With MoE each expert
    /// gets `mlp_width / experts`.
    #[serde(default)]
    pub mlp_width: Option<usize>,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    pub seed: u64,
    #[serde(default)]
    pub spike_taps: Vec<SpikeSpec>,
}

impl ModelConfig {
    /// A small config with the given shape; no MoE, no spikes.
    pub fn new(layers: usize, hidden_dim: usize, heads: usize, mlp_kind: MlpKind, seed: u64) -> Self {
        ModelConfig {
            model_id: default_model_id(),
            layers,
            hidden_dim,
            heads,
            vocab: 256,
            mlp_kind,
            mlp_width: None,
            moe: None,
            seed,
            spike_taps: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_width.unwrap_or(4 * self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(Error::Config { field, reason });
        if self.layers < 1 {
            return bad("layers", "must be at least 1".into());
        }
        if self.hidden_dim < 8 {
            return bad("hidden_dim", format!("must be at least 8, got {}", self.hidden_dim));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(
                "heads",
                format!("heads must divide d (heads = {}, d = {})", self.heads, self.hidden_dim),
            );
        }
        if self.vocab < 2 {
            return bad("vocab", "must be at least 2".into());
        }
        if self.mlp_width() == 0 {
            return bad("mlp_width", "must be positive".into());
        }
        if let Some(moe) = self.moe {
            if moe.experts < 2 {
                return bad("moe.experts", format!("need at least 2 experts, got {}", moe.experts));
            }
            if moe.top_k < 1 || moe.top_k >= moe.experts {
                return bad(
                    "moe.top_k",
                    format!("need 1 <= top_k < experts, got top_k = {} with {} experts", moe.top_k, moe.experts),
                );
            }
            if self.mlp_width() % moe.experts != 0 {
                return bad(
                    "mlp_width",
                    format!("width {} not divisible by {} experts", self.mlp_width(), moe.experts),
                );
            }
        }
        for (i, s) in self.spike_taps.iter().enumerate() {
            if s.layer >= self.layers {
                return bad("spike_taps.layer", format!("spike {i}: layer {} >= {}", s.layer, self.layers));
            }
            if s.dim >= self.hidden_dim {
                return bad("spike_taps.dim", format!("spike {i}: dim {} >= {}", s.dim, self.hidden_dim));
            }
            if !s.gain.is_finite() {
                return bad("spike_taps.gain", format!("spike {i}: gain must be finite"));
            }
        }
        Ok(())
    }

    /// Taps fired per sequence.
    pub fn taps_per_sequence(&self) -> usize {
        let per_layer = if self.mlp_kind == MlpKind::SwiGlu { 4 } else { 3 };
        2 + self.layers * per_layer
    }

    /// Every tap location the config implies, in emission order.
    pub fn tap_locations(&self) -> Vec<TapLocation> {
        let mut out = vec![TapLocation::new(0, ComponentClass::Embedding).expect("layer 0")];
        for l in 0..self.layers as u32 {
            out.push(TapLocation { layer: l, component: ComponentClass::AttentionOutput });
            if self.mlp_kind == MlpKind::SwiGlu {
                out.push(TapLocation { layer: l, component: ComponentClass::GatePreActivation });
            }
            out.push(TapLocation { layer: l, component: ComponentClass::MlpOutput });
            out.push(TapLocation::hidden(l));
        }
        out.push(TapLocation::new(0, ComponentClass::FinalNorm).expect("layer 0"));
        out
    }
}

/// Row-major `[rows × cols]` f32 matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, dist: &Normal<f32>) -> Self {
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Matrix { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x [t × rows] · self` → `[t × cols]`.
    fn apply(&self, x: &[f32], t: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), t * self.rows);
        let mut out = vec![0.0f32; t * self.cols];
        for (xi, oi) in x.chunks_exact(self.rows).zip(out.chunks_exact_mut(self.cols)) {
            for (r, &xv) in xi.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, &w) in oi.iter_mut().zip(self.row(r)) {
                    *o += xv * w;
                }
            }
        }
        out
    }

    fn len(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FeedForward {
    Dense { w_in: Matrix, w_out: Matrix },
    SwiGlu { w_gate: Matrix, w_up: Matrix, w_down: Matrix },
}

impl FeedForward {
    fn random(kind: MlpKind, d: usize, width: usize, rng: &mut ChaCha8Rng, dist: &Normal<f32>) -> Self {
        match kind {
            MlpKind::Dense => FeedForward::Dense {
                w_in: Matrix::random(d, width, rng, dist),
                w_out: Matrix::random(width, d, rng, dist),
            },
            MlpKind::SwiGlu => FeedForward::SwiGlu {
                w_gate: Matrix::random(d, width, rng, dist),
                w_up: Matrix::random(d, width, rng, dist),
                w_down: Matrix::random(width, d, rng, dist),
            },
        }
    }

    fn matrices(&self) -> Vec<&Matrix> {
        match self {
            FeedForward::Dense { w_in, w_out } => vec![w_in, w_out],
            FeedForward::SwiGlu { w_gate, w_up, w_down } => vec![w_gate, w_up, w_down],
        }
    }

    /// Returns `(output [t × d], gate pre-activation [t × width] for SwiGLU)`.
    fn apply(&self, x: &[f32], t: usize) -> (Vec<f32>, Option<Vec<f32>>) {
        match self {
            FeedForward::Dense { w_in, w_out } => {
                let mut hidden = w_in.apply(x, t);
                hidden.iter_mut().for_each(|v| *v = gelu(*v));
                (w_out.apply(&hidden, t), None)
            }
            FeedForward::SwiGlu { w_gate, w_up, w_down } => {
                let gate = w_gate.apply(x, t);
                let up = w_up.apply(x, t);
                let hidden: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
                (w_down.apply(&hidden, t), Some(gate))
            }
        }
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
enum MlpBlock {
    Dense(FeedForward),
    Moe { router: Matrix, experts: Vec<FeedForward>, top_k: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    mlp: MlpBlock,
}

/// Per-token routing decision: selected experts and renormalized weights,
/// ordered by descending weight (lower expert index first on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    pub experts: Vec<usize>,
    pub weights: Vec<f64>,
}

/// A built model. Immutable; `forward` is a pure function of the tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    embedding: Matrix,
    layers: Vec<Layer>,
    unembedding: Matrix,
}

/// Logits plus every record fired during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f32>,
    pub records: Vec<ActivationRecord>,
}

fn rms_norm(x: &[f32], d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

impl ToyModel {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let width = cfg.mlp_width();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0f32, INIT_STD).expect("valid std");

        let embedding = Matrix::random(cfg.vocab, d, &mut rng, &dist);
        let layers = (0..cfg.layers)
            .map(|_| {
                let wq = Matrix::random(d, d, &mut rng, &dist);
                let wk = Matrix::random(d, d, &mut rng, &dist);
                let wv = Matrix::random(d, d, &mut rng, &dist);
                let wo = Matrix::random(d, d, &mut rng, &dist);
                let mlp = match cfg.moe {
                    None => MlpBlock::Dense(FeedForward::random(cfg.mlp_kind, d, width, &mut rng, &dist)),
                    Some(moe) => {
                        let router = Matrix::random(d, moe.experts, &mut rng, &dist);
                        let experts = (0..moe.experts)
                            .map(|_| FeedForward::random(cfg.mlp_kind, d, width / moe.experts, &mut rng, &dist))
                            .collect();
                        MlpBlock::Moe { router, experts, top_k: moe.top_k }
                    }
                };
                Layer { wq, wk, wv, wo, mlp }
            })
            .collect();
        let unembedding = Matrix::random(d, cfg.vocab, &mut rng, &dist);

        Ok(ToyModel {
            cfg: cfg.clone(),
            embedding,
            layers,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend([&layer.wq, &layer.wk, &layer.wv, &layer.wo]);
            match &layer.mlp {
                MlpBlock::Dense(ff) => out.extend(ff.matrices()),
                MlpBlock::Moe { router, experts, .. } => {
                    out.push(router);
                    experts.iter().for_each(|e| out.extend(e.matrices()));
                }
            }
        }
        out.push(&self.unembedding);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    /// Parameters in the MLP/MoE blocks, router included.
    pub fn mlp_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.mlp {
                MlpBlock::Dense(ff) => ff.matrices().iter().map(|m| m.len()).sum::<usize>(),
                MlpBlock::Moe { router, experts, .. } => {
                    router.len()
                        + experts
                            .iter()
                            .flat_map(|e| e.matrices())
                            .map(|m| m.len())
                            .sum::<usize>()
                }
            })
            .sum()
    }

    /// FNV-1a over the bit patterns of every weight, in draw order.
    pub fn weight_checksum(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for m in self.matrices() {
            for v in &m.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        format!("{h:016x}")
    }

    /// Routes `normed` (`[t × d]`) through the MoE block at `layer`, returning
    /// the combined expert output and the per-token routing.
    pub fn route_moe(&self, layer: usize, normed: &[f32]) -> Result<(Vec<f32>, Vec<Routing>)> {
        let (out, routing, _) = self.moe_forward(layer, normed)?;
        Ok((out, routing))
    }

    fn moe_forward(&self, layer: usize, normed: &[f32]) -> Result<(Vec<f32>, Vec<Routing>, Option<Vec<f32>>)> {
        let d = self.cfg.hidden_dim;
        let Some(MlpBlock::Moe { router, experts, top_k }) = self.layers.get(layer).map(|l| &l.mlp) else {
            return Err(Error::InvalidInput(format!("layer {layer} has no MoE block")));
        };
        let t = normed.len() / d;
        let logits = router.apply(normed, t);
        let mut out = vec![0.0f32; t * d];
        let mut routing = Vec::with_capacity(t);
        let swiglu = self.cfg.mlp_kind == MlpKind::SwiGlu;
        let mut gates = swiglu.then(Vec::new);

        for (ti, row) in logits.chunks_exact(experts.len()).enumerate() {
            let r = route_token(row, *top_k);
            let x = &normed[ti * d..(ti + 1) * d];
            let dst = &mut out[ti * d..(ti + 1) * d];
            for (&e, &w) in r.experts.iter().zip(&r.weights) {
                let (y, gate) = experts[e].apply(x, 1);
                let w = w as f32;
                dst.iter_mut().zip(&y).for_each(|(o, v)| *o += w * v);
                if let (Some(all), Some(g)) = (gates.as_mut(), gate) {
                    all.extend(g);
                }
            }
            routing.push(r);
        }
        Ok((out, routing, gates))
    }

    pub fn forward(&self, sample_id: &str, tokens: &[u32]) -> Result<ForwardTrace> {
        let mut records = Vec::with_capacity(self.cfg.taps_per_sequence());
        let logits = self.forward_with_sink(sample_id, tokens, &mut |r| records.push(r))?;
        Ok(ForwardTrace { logits, records })
    }

    /// Runs the forward pass, handing each record to `sink` as it fires.
    pub fn forward_with_sink(
        &self,
        sample_id: &str,
        tokens: &[u32],
        sink: &mut dyn FnMut(ActivationRecord),
    ) -> Result<Vec<f32>> {
        let cfg = &self.cfg;
        let d = cfg.hidden_dim;
        let t = tokens.len();
        if t == 0 {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab) {
            return Err(Error::TokenOutOfRange { token: bad, vocab: cfg.vocab });
        }

        let mut emit = |layer: u32, component: ComponentClass, dim: usize, values: &[f32]| {
            let location = TapLocation { layer, component };
            let widened = values.iter().map(|&v| f64::from(v)).collect();
            sink(ActivationRecord::raw(&cfg.model_id, sample_id, location, t, dim, widened));
        };

        let mut h: Vec<f32> = tokens
            .iter()
            .flat_map(|&tok| self.embedding.row(tok as usize).iter().copied())
            .collect();
        emit(0, ComponentClass::Embedding, d, &h);

        for (li, layer) in self.layers.iter().enumerate() {
            let l = li as u32;
            let attn = self.attention(layer, &rms_norm(&h, d), t);
            emit(l, ComponentClass::AttentionOutput, d, &attn);
            h.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);

            let normed = rms_norm(&h, d);
            let (mlp_out, gate) = match &layer.mlp {
                MlpBlock::Dense(ff) => ff.apply(&normed, t),
                MlpBlock::Moe { .. } => {
                    let (out, _, gate) = self.moe_forward(li, &normed)?;
                    (out, gate)
                }
            };
            if let Some(gate) = gate {
                let gate_dim = gate.len() / t;
                emit(l, ComponentClass::GatePreActivation, gate_dim, &gate);
            }
            emit(l, ComponentClass::MlpOutput, d, &mlp_out);
            h.iter_mut().zip(&mlp_out).for_each(|(a, b)| *a += b);

            for s in cfg.spike_taps.iter().filter(|s| s.layer == li && s.token_index < t) {
                h[s.token_index * d + s.dim] += s.gain as f32;
            }
            emit(l, ComponentClass::HiddenState, d, &h);
        }

        let final_normed = rms_norm(&h, d);
        emit(0, ComponentClass::FinalNorm, d, &final_normed);
        Ok(self.unembedding.apply(&final_normed, t))
    }

    fn attention(&self, layer: &Layer, x: &[f32], t: usize) -> Vec<f32> {
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let q = layer.wq.apply(x, t);
        let k = layer.wk.apply(x, t);
        let v = layer.wv.apply(x, t);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ctx = vec![0.0f32; t * d];
        let mut scores = vec![0.0f32; t];

        for head in 0..heads {
            let off = head * hd;
            for i in 0..t {
                let qi = &q[i * d + off..i * d + off + hd];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut denom = 0.0f32;
                for s in &mut scores[..=i] {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let out = &mut ctx[i * d + off..i * d + off + hd];
                for (j, &p) in scores[..=i].iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + hd];
                    let w = p / denom;
                    out.iter_mut().zip(vj).for_each(|(o, &vv)| *o += w * vv);
                }
            }
        }
        layer.wo.apply(&ctx, t)
    }
}

/// Softmax over router logits, top-k selection (lower index wins ties), and
/// renormalization of the selected weights.
pub fn route_token(logits: &[f32], top_k: usize) -> Routing {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let kept: f64 = order.iter().map(|&e| probs[e]).sum();
    let weights = order.iter().map(|&e| probs[e] / kept).collect();
    Routing { experts: order, weights }
}

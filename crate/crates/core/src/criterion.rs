//! Massive-activation criterion.
//!
//! A coordinate `x_i` of a token vector qualifies when `|x_i| > abs_threshold`
//! and `|x_i| / median_j |x_j| > ratio_threshold` (both strict). A model passes
//! when any hidden-state layer holds a qualifying coordinate.
//!
//! Two evaluation modes exist. [`evaluate_model`] works from the per-layer
//! token evidence kept by [`CellAccumulator`] (peak token and max-ratio token).
//! [`FullScan`] checks every token of raw hidden-state records and is exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::TokenView;
use crate::stats::{local_ratio, median_abs_in_place, peak_coordinate, CellAccumulator, TokenEvidence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionConfig {
    pub abs_threshold: f64,
    pub ratio_threshold: f64,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig {
            abs_threshold: 100.0,
            ratio_threshold: 1000.0,
        }
    }
}

impl CriterionConfig {
    pub fn new(abs_threshold: f64, ratio_threshold: f64) -> Result<Self> {
        for (field, v) in [("abs_threshold", abs_threshold), ("ratio_threshold", ratio_threshold)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    field,
                    reason: format!("must be a positive finite number, got {v}"),
                });
            }
        }
        Ok(CriterionConfig {
            abs_threshold,
            ratio_threshold,
        })
    }

    /// Both strict comparisons against a token's peak and local ratio.
    pub fn admits(&self, peak_abs: f64, ratio: f64) -> bool {
        peak_abs > self.abs_threshold && ratio > self.ratio_threshold
    }

    fn admits_evidence(&self, e: &TokenEvidence) -> bool {
        self.admits(e.peak_abs, e.local_ratio)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    InsufficientRatio,
    InsufficientMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluationMode {
    StreamingEvidence,
    FullScan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Peak,
    MaxRatio,
}

impl PointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PointKind::Peak => "peak",
            PointKind::MaxRatio => "max_ratio",
        }
    }
}

/// One point of the per-layer failure scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub layer: u32,
    pub kind: PointKind,
    pub abs_value: f64,
    #[serde(with = "crate::serde_ext")]
    pub local_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub layer: u32,
    pub dim: u32,
    pub evidence: TokenEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub passes: bool,
    pub mode: EvaluationMode,
    pub witness: Option<Witness>,
    pub failure_mode: Option<FailureMode>,
    pub scatter: Vec<ScatterPoint>,
}

impl CriterionResult {
    /// Checks `passes ⇔ witness` and `failure_mode ⇔ !passes`.
    pub fn is_consistent(&self) -> bool {
        self.passes == self.witness.is_some() && self.passes != self.failure_mode.is_some()
    }
}

/// Dimensions of `x` that satisfy both thresholds.
pub fn evaluate_token(x: TokenView<'_>, cfg: &CriterionConfig) -> Vec<usize> {
    if x.values.is_empty() {
        return Vec::new();
    }
    let mut abs: Vec<f64> = x.values.iter().map(|v| v.abs()).collect();
    let median = median_abs_in_place(&mut abs);
    x.values
        .iter()
        .enumerate()
        .filter(|(_, v)| cfg.admits(v.abs(), local_ratio(v.abs(), median)))
        .map(|(i, _)| i)
        .collect()
}

/// Evidence distilled from one hidden layer, shared by both modes.
#[derive(Debug, Clone)]
struct LayerEvidence {
    layer: u32,
    peak: TokenEvidence,
    max_ratio: TokenEvidence,
    witness: Option<TokenEvidence>,
    magnitude_exceeded: bool,
}

fn assemble(mode: EvaluationMode, layers: Vec<LayerEvidence>) -> Result<CriterionResult> {
    if layers.is_empty() {
        return Err(Error::Empty("hidden-state cells"));
    }
    let scatter = layers
        .iter()
        .flat_map(|l| {
            [(PointKind::Peak, &l.peak), (PointKind::MaxRatio, &l.max_ratio)].map(|(kind, e)| ScatterPoint {
                layer: l.layer,
                kind,
                abs_value: e.peak_abs,
                local_ratio: e.local_ratio,
            })
        })
        .collect();
    let witness = layers.iter().find_map(|l| {
        l.witness.as_ref().map(|e| Witness {
            layer: l.layer,
            dim: e.peak_dim,
            evidence: e.clone(),
        })
    });
    let passes = witness.is_some();
    let failure_mode = (!passes).then(|| {
        if layers.iter().any(|l| l.magnitude_exceeded) {
            FailureMode::InsufficientRatio
        } else {
            FailureMode::InsufficientMagnitude
        }
    });
    Ok(CriterionResult {
        passes,
        mode,
        witness,
        failure_mode,
        scatter,
    })
}

/// Streaming-evidence evaluation over per-layer hidden-state cells.
pub fn evaluate_model<'a>(
    cells: impl IntoIterator<Item = (u32, &'a CellAccumulator)>,
    cfg: &CriterionConfig,
) -> Result<CriterionResult> {
    let mut by_layer: Vec<(u32, &CellAccumulator)> = cells.into_iter().filter(|(_, c)| !c.is_empty()).collect();
    by_layer.sort_by_key(|(l, _)| *l);
    let layers = by_layer
        .into_iter()
        .map(|(layer, cell)| {
            let peak = cell.peak_token.clone().expect("non-empty cell has a peak token");
            let max_ratio = cell.max_ratio_token.clone().expect("non-empty cell has a max-ratio token");
            let witness = [&peak, &max_ratio]
                .into_iter()
                .find(|e| cfg.admits_evidence(e))
                .cloned();
            LayerEvidence {
                layer,
                magnitude_exceeded: peak.peak_abs > cfg.abs_threshold,
                peak,
                max_ratio,
                witness,
            }
        })
        .collect();
    assemble(EvaluationMode::StreamingEvidence, layers)
}

#[derive(Debug, Clone)]
struct LayerScan {
    peak: TokenEvidence,
    max_ratio: TokenEvidence,
    first_witness: Option<TokenEvidence>,
}

/// Exact evaluation over every hidden-state token, fed incrementally.
#[derive(Debug, Clone)]
pub struct FullScan {
    cfg: CriterionConfig,
    layers: BTreeMap<u32, LayerScan>,
    scratch: Vec<f64>,
}

impl FullScan {
    pub fn new(cfg: CriterionConfig) -> Self {
        FullScan {
            cfg,
            layers: BTreeMap::new(),
            scratch: Vec::new(),
        }
    }

    pub fn observe(&mut self, layer: u32, tok: TokenView<'_>) {
        if tok.values.is_empty() {
            return;
        }
        let (_, peak_value) = peak_coordinate(tok.values);
        let peak_abs = peak_value.abs();
        self.scratch.clear();
        self.scratch.extend(tok.values.iter().map(|v| v.abs()));
        let ratio = local_ratio(peak_abs, median_abs_in_place(&mut self.scratch));
        let qualifies = self.cfg.admits(peak_abs, ratio);

        match self.layers.get_mut(&layer) {
            None => {
                let e = TokenEvidence::from_token(tok);
                self.layers.insert(
                    layer,
                    LayerScan {
                        peak: e.clone(),
                        max_ratio: e.clone(),
                        first_witness: qualifies.then_some(e),
                    },
                );
            }
            Some(scan) => {
                if peak_abs > scan.peak.peak_abs {
                    scan.peak = TokenEvidence::from_token(tok);
                }
                if ratio > scan.max_ratio.local_ratio {
                    scan.max_ratio = TokenEvidence::from_token(tok);
                }
                if qualifies && scan.first_witness.is_none() {
                    scan.first_witness = Some(TokenEvidence::from_token(tok));
                }
            }
        }
    }

    pub fn finish(&self) -> Result<CriterionResult> {
        let layers = self
            .layers
            .iter()
            .map(|(&layer, s)| LayerEvidence {
                layer,
                magnitude_exceeded: s.peak.peak_abs > self.cfg.abs_threshold,
                peak: s.peak.clone(),
                max_ratio: s.max_ratio.clone(),
                witness: s.first_witness.clone(),
            })
            .collect();
        assemble(EvaluationMode::FullScan, layers)
    }
}

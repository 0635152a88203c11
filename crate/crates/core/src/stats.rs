//! Streaming per-cell statistics.
//!
//! A cell is one (layer, component) tap location. Its [`CellAccumulator`]
//! folds token vectors into exact moments, extremes, an absolute-value
//! quantile sketch, the top-K coordinates, and two pieces of token evidence:
//! the token carrying the cell maximum and the token with the largest local
//! ratio. Accumulators merge; moments, extremes and top-K merge exactly.
//!
//! Standard deviation is the population (1/n) value. All arithmetic is f64.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::record::TokenView;
use crate::sketch::QuantileSketch;
use crate::topk::TopK;

/// Quantiles written to the statistics file.
pub const REPORTED_QUANTILES: [f64; 5] = [0.5, 0.9, 0.99, 0.999, 0.9999];

/// Streaming moments, extremes, and the |x| quantile sketch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatSummary {
    count: u64,
    sum: ExactSum,
    sum_sq: ExactSum,
    sum_abs: ExactSum,
    #[serde(with = "crate::serde_ext")]
    max: f64,
    #[serde(with = "crate::serde_ext")]
    min: f64,
    abs_quantiles: QuantileSketch,
}

impl<'de> Deserialize<'de> for StatSummary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            count: u64,
            sum: ExactSum,
            sum_sq: ExactSum,
            sum_abs: ExactSum,
            #[serde(with = "crate::serde_ext")]
            max: f64,
            #[serde(with = "crate::serde_ext")]
            min: f64,
            abs_quantiles: QuantileSketch,
        }
        let r = Repr::deserialize(d)?;
        let mut abs_quantiles = r.abs_quantiles;
        abs_quantiles.rehydrate();
        Ok(StatSummary {
            count: r.count,
            sum: r.sum,
            sum_sq: r.sum_sq,
            sum_abs: r.sum_abs,
            max: r.max,
            min: r.min,
            abs_quantiles,
        })
    }
}

impl Default for StatSummary {
    fn default() -> Self {
        StatSummary {
            count: 0,
            sum: ExactSum::new(),
            sum_sq: ExactSum::new(),
            sum_abs: ExactSum::new(),
            max: f64::NEG_INFINITY,
            min: f64::INFINITY,
            abs_quantiles: QuantileSketch::default(),
        }
    }
}

impl StatSummary {
    #[inline]
    fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum.add(x);
        self.sum_sq.add_square(x);
        self.sum_abs.add(x.abs());
        if x > self.max {
            self.max = x;
        }
        if x < self.min {
            self.min = x;
        }
        self.abs_quantiles.insert(x.abs());
    }

    fn merge(&mut self, other: &StatSummary) {
        self.count += other.count;
        self.sum.add_sum(&other.sum);
        self.sum_sq.add_sum(&other.sum_sq);
        self.sum_abs.add_sum(&other.sum_abs);
        self.max = self.max.max(other.max);
        self.min = self.min.min(other.min);
        self.abs_quantiles.merge(&other.abs_quantiles);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn n(&self) -> f64 {
        self.count as f64
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sum.value() / self.n()
    }

    /// Population variance from the exact numerator `n·Σx² − (Σx)²`.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let mut num = self.sum_sq.scaled(self.n());
        num.add_sum(&self.sum.squared().negated());
        (num.value().max(0.0) / self.n()) / self.n()
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn rms(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        (self.sum_sq.value() / self.n()).sqrt()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.sum_abs.value() / self.n()
    }

    pub fn max(&self) -> Option<f64> {
        (self.count > 0).then_some(self.max)
    }

    pub fn min(&self) -> Option<f64> {
        (self.count > 0).then_some(self.min)
    }

    /// `max(|max|, |min|)`, or 0 when empty.
    pub fn max_abs(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.max.abs().max(self.min.abs())
        }
    }

    pub fn abs_quantile(&self, q: f64) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Empty("accumulator"));
        }
        self.abs_quantiles.quantile(q)
    }

    pub fn sketch(&self) -> &QuantileSketch {
        &self.abs_quantiles
    }

    /// The flat form written to statistics files.
    pub fn report(&self) -> SummaryReport {
        let quantiles = if self.count == 0 {
            BTreeMap::new()
        } else {
            REPORTED_QUANTILES
                .iter()
                .map(|&q| (q.to_string(), self.abs_quantiles.quantile(q).expect("non-empty")))
                .collect()
        };
        SummaryReport {
            count: self.count,
            mean: self.mean(),
            std: self.std(),
            rms: self.rms(),
            mean_abs: self.mean_abs(),
            max: self.max().unwrap_or(0.0),
            min: self.min().unwrap_or(0.0),
            quantiles,
        }
    }
}

/// Statistics-file view of a [`StatSummary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub mean_abs: f64,
    pub max: f64,
    pub min: f64,
    pub quantiles: BTreeMap<String, f64>,
}

/// Peak over median, with `+inf` for a zero median under a positive peak
/// and 0 for an all-zero token.
pub fn local_ratio(peak_abs: f64, median_abs: f64) -> f64 {
    if median_abs > 0.0 {
        peak_abs / median_abs
    } else if peak_abs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Median of `|x|`; the midpoint of the two central order statistics for
/// even lengths. Reorders `scratch`.
pub fn median_abs_in_place(scratch: &mut [f64]) -> f64 {
    let d = scratch.len();
    assert!(d > 0, "median of empty token");
    let mid = d / 2;
    let (lower, upper_mid, _) = scratch.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper_mid;
    if d % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (below + upper) / 2.0
    }
}

/// Nearest-rank quantile (`⌈q·n⌉`-th smallest) of an ascending slice.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Per-token magnitude profile used by the massive-activation criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvidence {
    pub sample_id: String,
    pub token_index: u32,
    /// Coordinate carrying `peak_abs` (first on ties).
    pub peak_dim: u32,
    pub peak_value: f64,
    pub peak_abs: f64,
    pub median_abs: f64,
    pub q90_abs: f64,
    pub q99_abs: f64,
    #[serde(with = "crate::serde_ext")]
    pub local_ratio: f64,
}

impl TokenEvidence {
    pub fn from_token(tok: TokenView<'_>) -> Self {
        let (peak_dim, peak_value) = peak_coordinate(tok.values);
        let mut abs: Vec<f64> = tok.values.iter().map(|v| v.abs()).collect();
        let median_abs = median_abs_in_place(&mut abs);
        abs.sort_unstable_by(f64::total_cmp);
        let peak_abs = peak_value.abs();
        TokenEvidence {
            sample_id: tok.sample_id.to_owned(),
            token_index: tok.token_index,
            peak_dim: peak_dim as u32,
            peak_value,
            peak_abs,
            median_abs,
            q90_abs: nearest_rank(&abs, 0.90),
            q99_abs: nearest_rank(&abs, 0.99),
            local_ratio: local_ratio(peak_abs, median_abs),
        }
    }

    /// Evidence built from published magnitudes alone (no token vector).
    pub fn from_magnitudes(sample_id: impl Into<String>, peak_abs: f64, median_abs: f64) -> Self {
        TokenEvidence {
            sample_id: sample_id.into(),
            token_index: 0,
            peak_dim: 0,
            peak_value: peak_abs,
            peak_abs,
            median_abs,
            q90_abs: median_abs,
            q99_abs: peak_abs,
            local_ratio: local_ratio(peak_abs, median_abs),
        }
    }

    fn key(&self) -> (&str, u32) {
        (&self.sample_id, self.token_index)
    }
}

/// Index and signed value of the largest-magnitude coordinate.
pub fn peak_coordinate(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v.abs() > best.1.abs() {
            best = (i, v);
        }
    }
    best
}

/// Picks the evidence with the larger `metric`; equal metrics keep the
/// earlier token so the choice does not depend on merge order.
fn pick<'a>(a: &'a TokenEvidence, b: &'a TokenEvidence, metric: fn(&TokenEvidence) -> f64) -> &'a TokenEvidence {
    match metric(a).total_cmp(&metric(b)) {
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Equal => {
            if b.key() < a.key() {
                b
            } else {
                a
            }
        }
    }
}

fn merge_evidence(
    mine: &mut Option<TokenEvidence>,
    theirs: &Option<TokenEvidence>,
    metric: fn(&TokenEvidence) -> f64,
) {
    match (mine.as_ref(), theirs) {
        (_, None) => {}
        (None, Some(t)) => *mine = Some(t.clone()),
        (Some(m), Some(t)) => {
            if std::ptr::eq(pick(m, t, metric), t) {
                *mine = Some(t.clone());
            }
        }
    }
}

/// All streaming state for one (layer, component) cell.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CellAccumulator {
    pub summary: StatSummary,
    pub topk: TopK,
    pub peak_token: Option<TokenEvidence>,
    pub max_ratio_token: Option<TokenEvidence>,
    #[serde(skip)]
    scratch: Vec<f64>,
}

impl PartialEq for CellAccumulator {
    fn eq(&self, other: &Self) -> bool {
        self.summary == other.summary
            && self.topk == other.topk
            && self.peak_token == other.peak_token
            && self.max_ratio_token == other.max_ratio_token
    }
}

impl CellAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_top_k(k: usize) -> Self {
        CellAccumulator {
            topk: TopK::new(k),
            ..Self::default()
        }
    }

    pub fn count(&self) -> u64 {
        self.summary.count
    }

    pub fn is_empty(&self) -> bool {
        self.summary.count == 0
    }

    pub fn max_abs(&self) -> f64 {
        self.summary.max_abs()
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        self.summary.abs_quantile(q)
    }

    /// Folds one token vector into the cell.
    pub fn update(&mut self, tok: TokenView<'_>) -> Result<()> {
        if tok.values.is_empty() {
            return Err(Error::InvalidInput("token vector has zero dimensions".into()));
        }
        if let Some(i) = tok.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value in {}:{} at dim {i}",
                tok.sample_id, tok.token_index
            )));
        }

        let mut token_peak = 0.0f64;
        for (dim, &x) in tok.values.iter().enumerate() {
            self.summary.push(x);
            self.topk.offer(x, tok.sample_id, tok.token_index, dim as u32);
            token_peak = token_peak.max(x.abs());
        }

        let new_cell_max = self.peak_token.as_ref().is_none_or(|p| token_peak > p.peak_abs);
        if new_cell_max {
            self.peak_token = Some(TokenEvidence::from_token(tok));
        }

        self.scratch.clear();
        self.scratch.extend(tok.values.iter().map(|v| v.abs()));
        let ratio = local_ratio(token_peak, median_abs_in_place(&mut self.scratch));
        let new_ratio_max = self.max_ratio_token.as_ref().is_none_or(|m| ratio > m.local_ratio);
        if new_ratio_max {
            self.max_ratio_token = Some(match (&self.peak_token, new_cell_max) {
                (Some(p), true) => p.clone(),
                _ => TokenEvidence::from_token(tok),
            });
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &CellAccumulator) {
        self.summary.merge(&other.summary);
        self.topk.merge(&other.topk);
        merge_evidence(&mut self.peak_token, &other.peak_token, |e| e.peak_abs);
        merge_evidence(&mut self.max_ratio_token, &other.max_ratio_token, |e| e.local_ratio);
    }

    pub fn merged(mut self, other: &CellAccumulator) -> Self {
        self.merge(other);
        self
    }

    /// Checks the accumulator's cross-field invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let s = &self.summary;
        if s.count == 0 {
            return Ok(());
        }
        let fail = |what: String| Err(Error::Invariant(what));
        let (mean, max, min) = (s.mean(), s.max, s.min);
        if !(min <= mean && mean <= max) {
            return fail(format!("mean {mean} outside [{min}, {max}]"));
        }
        // Squares of magnitudes below ~1.5e-154 underflow, so rms can read
        // low by that much.
        let slack = 1.0 + 4.0 * f64::EPSILON;
        let floor = f64::MIN_POSITIVE.sqrt();
        if s.rms() * slack + floor < mean.abs() {
            return fail(format!("rms {} < |mean| {}", s.rms(), mean.abs()));
        }
        if s.mean_abs() > s.rms() * slack + floor {
            return fail(format!("mean_abs {} > rms {}", s.mean_abs(), s.rms()));
        }
        if s.abs_quantiles.observed_max() != Some(s.max_abs()) {
            return fail("sketch maximum differs from max(|max|, |min|)".into());
        }
        match &self.peak_token {
            Some(p) if p.peak_abs == s.max_abs() => Ok(()),
            Some(p) => fail(format!("peak_token {} != cell max {}", p.peak_abs, s.max_abs())),
            None => fail("peak_token missing on non-empty cell".into()),
        }
    }
}

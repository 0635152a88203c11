//! Model-level analyses over accumulated cells.
//!
//! Covers the global maximum `M` and its carrier, hidden-state trajectories
//! binned on normalized depth, representative rows, tiers, matched-pair
//! ratios and the subsample stability protocol. CSV writers emit plot-ready
//! tables; rendering is left to external tools.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{stratified_subsample, CorpusSample};
use crate::criterion::CriterionResult;
use crate::error::{Error, Result};
use crate::record::{ComponentClass, TapLocation};
use crate::stats::CellAccumulator;

pub const DEFAULT_BINS: usize = 20;

/// Lower bounds of tiers 1..4; tier 0 is `[0, 1e2)`, tier 4 is `[1e5, ∞)`.
pub const TIER_BOUNDS: [f64; 4] = [1e2, 1e3, 1e4, 1e5];
pub const TIER_COUNT: usize = TIER_BOUNDS.len() + 1;

/// Order-of-magnitude tier of a global maximum (lower-inclusive bounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tier(pub u8);

impl Tier {
    pub fn lower(self) -> f64 {
        match self.0 {
            0 => 0.0,
            i => TIER_BOUNDS[i as usize - 1],
        }
    }

    /// `None` for the open top tier.
    pub fn upper(self) -> Option<f64> {
        TIER_BOUNDS.get(self.0 as usize).copied()
    }

    pub fn label(self) -> String {
        match self.upper() {
            Some(u) => format!("[{:e}, {:e})", self.lower(), u),
            None => format!("[{:e}, inf)", self.lower()),
        }
    }
}

pub fn tier_of(m: f64) -> Result<Tier> {
    if !(m >= 0.0) {
        return Err(Error::InvalidInput(format!("tier of negative or NaN magnitude {m}")));
    }
    Ok(Tier(TIER_BOUNDS.iter().filter(|&&b| m >= b).count() as u8))
}

pub fn tier_histogram(ms: impl IntoIterator<Item = f64>) -> Result<[usize; TIER_COUNT]> {
    let mut hist = [0; TIER_COUNT];
    for m in ms {
        hist[tier_of(m)?.0 as usize] += 1;
    }
    Ok(hist)
}

/// Largest `max|a|` over all cells and the cell attaining it. Ties go to the
/// earlier component in declaration order, then the lower layer.
pub fn global_max<'a>(cells: impl IntoIterator<Item = (TapLocation, &'a CellAccumulator)>) -> Result<(f64, TapLocation)> {
    let mut best: Option<(f64, TapLocation)> = None;
    for (loc, cell) in cells {
        if cell.is_empty() {
            continue;
        }
        let m = cell.max_abs();
        best = match best {
            Some((bm, bl)) if bm > m || (bm == m && bl.tie_key() <= loc.tie_key()) => Some((bm, bl)),
            _ => Some((m, loc)),
        };
    }
    best.ok_or(Error::Empty("cells"))
}

/// Depth of layer `l` among `layers`: `l / (L - 1)`, 0 for a single layer.
pub fn layer_depth(layer: u32, layers: u32) -> f64 {
    if layers <= 1 {
        0.0
    } else {
        f64::from(layer) / f64::from(layers - 1)
    }
}

/// Bins a per-layer peak trajectory onto `bins` equal depth intervals.
/// Each bin holds the maximum of its member layers; empty bins are `None`.
pub fn normalized_trajectory(trajectory: &[f64], bins: usize) -> Result<Vec<Option<f64>>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    if bins == 0 {
        return Err(Error::Config {
            field: "bins",
            reason: "must be at least 1".into(),
        });
    }
    let layers = trajectory.len() as u32;
    let mut out: Vec<Option<f64>> = vec![None; bins];
    for (l, &peak) in trajectory.iter().enumerate() {
        let bin = ((layer_depth(l as u32, layers) * bins as f64).floor() as usize).min(bins - 1);
        out[bin] = Some(out[bin].map_or(peak, |v| v.max(peak)));
    }
    Ok(out)
}

/// The bin with the largest value; ties go to the shallower bin.
pub fn peak_bin(bins: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in bins.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lower {
    First,
    Second,
    Neither,
}

/// `max / min` of two positive magnitudes and which side is smaller.
pub fn matched_pair_ratio(a: f64, b: f64) -> Result<(f64, Lower)> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidInput(format!("matched pair needs positive magnitudes, got ({a}, {b})")));
    }
    let lower = match a.total_cmp(&b) {
        std::cmp::Ordering::Less => Lower::First,
        std::cmp::Ordering::Greater => Lower::Second,
        std::cmp::Ordering::Equal => Lower::Neither,
    };
    Ok((a.max(b) / a.min(b), lower))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedPair {
    pub first: String,
    pub second: String,
    pub m_first: f64,
    pub m_second: f64,
    pub ratio: f64,
    /// Model id of the smaller side, `None` when equal.
    pub lower: Option<String>,
}

impl MatchedPair {
    pub fn new(first: &str, m_first: f64, second: &str, m_second: f64) -> Result<Self> {
        let (ratio, lower) = matched_pair_ratio(m_first, m_second)?;
        Ok(MatchedPair {
            first: first.to_owned(),
            second: second.to_owned(),
            m_first,
            m_second,
            ratio,
            lower: match lower {
                Lower::First => Some(first.to_owned()),
                Lower::Second => Some(second.to_owned()),
                Lower::Neither => None,
            },
        })
    }
}

/// True when each value is at least the one before it.
pub fn is_monotone_nondecreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] <= w[1])
}

/// Table-style row for the representative cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentativeRow {
    /// Up to five largest magnitudes, descending.
    pub top: Vec<f64>,
    pub top10: f64,
    pub top100: f64,
    /// Population magnitude quantiles ("top 1%" / "top 10%" thresholds).
    pub pop_q99: f64,
    pub pop_q90: f64,
    /// Quantiles of the cell's peak token.
    pub token_q99: f64,
    pub token_q90: f64,
    pub token_median: f64,
    pub observations: u64,
    /// Set when fewer than 100 values were observed; `top10`/`top100` then
    /// fall back to the smallest retained magnitude.
    pub partial: bool,
}

pub fn representative_row(cell: &CellAccumulator) -> Result<RepresentativeRow> {
    let peak = cell.peak_token.as_ref().ok_or(Error::Empty("representative cell"))?;
    let entries = cell.topk.entries();
    let nth = |n: usize| entries.get(n - 1).or(entries.last()).map_or(0.0, |e| e.abs_value);
    Ok(RepresentativeRow {
        top: entries.iter().take(5).map(|e| e.abs_value).collect(),
        top10: nth(10),
        top100: nth(100),
        pop_q99: cell.quantile(0.99)?,
        pop_q90: cell.quantile(0.90)?,
        token_q99: peak.q99_abs,
        token_q90: peak.q90_abs,
        token_median: peak.median_abs,
        observations: cell.count(),
        partial: entries.len() < 100,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPeak {
    pub layer: u32,
    pub depth: f64,
    pub peak: f64,
}

/// The releasable per-model statistics object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub model_id: String,
    pub global_max: f64,
    pub carrier: TapLocation,
    pub tier: Tier,
    /// Hidden-state layer with the largest peak and its normalized depth.
    pub peak_layer: Option<u32>,
    pub peak_depth: Option<f64>,
    pub trajectory: Vec<LayerPeak>,
    pub depth_bins: Vec<Option<f64>>,
    pub peak_bin: Option<usize>,
    /// Absent when hidden states were not tapped.
    pub criterion: Option<CriterionResult>,
    pub representative_location: TapLocation,
    pub representative_row: RepresentativeRow,
    pub component_maxima: BTreeMap<ComponentClass, f64>,
}

/// Assembles a card from all cells of one model.
pub fn build_card(
    model_id: &str,
    cells: &BTreeMap<TapLocation, CellAccumulator>,
    criterion: Option<CriterionResult>,
    bins: usize,
) -> Result<ModelCard> {
    let (global_max, carrier) = global_max(cells.iter().map(|(l, c)| (*l, c)))?;

    let hidden: Vec<(u32, f64)> = cells
        .iter()
        .filter(|(l, c)| l.component == ComponentClass::HiddenState && !c.is_empty())
        .map(|(l, c)| (l.layer, c.max_abs()))
        .collect();
    let layers = hidden.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let trajectory: Vec<LayerPeak> = hidden
        .iter()
        .map(|&(layer, peak)| LayerPeak {
            layer,
            depth: layer_depth(layer, layers),
            peak,
        })
        .collect();
    let (depth_bins, peak_bin) = if hidden.is_empty() {
        (Vec::new(), None)
    } else {
        let mut dense = vec![0.0; layers as usize];
        hidden.iter().for_each(|&(l, p)| dense[l as usize] = p);
        let binned = normalized_trajectory(&dense, bins)?;
        let pb = peak_bin(&binned);
        (binned, pb)
    };
    let peak = trajectory
        .iter()
        .fold(None::<&LayerPeak>, |best, p| match best {
            Some(b) if b.peak >= p.peak => Some(b),
            _ => Some(p),
        });

    let representative_location = match criterion.as_ref().and_then(|c| c.witness.as_ref()) {
        Some(w) => TapLocation::hidden(w.layer),
        None => carrier,
    };
    let rep_cell = cells.get(&representative_location).ok_or_else(|| {
        Error::Invariant(format!("representative location {representative_location} has no cell"))
    })?;

    let mut component_maxima: BTreeMap<ComponentClass, f64> = BTreeMap::new();
    for (loc, cell) in cells.iter().filter(|(_, c)| !c.is_empty()) {
        let m = component_maxima.entry(loc.component).or_insert(0.0);
        *m = m.max(cell.max_abs());
    }

    Ok(ModelCard {
        model_id: model_id.to_owned(),
        global_max,
        carrier,
        tier: tier_of(global_max)?,
        peak_layer: peak.map(|p| p.layer),
        peak_depth: peak.map(|p| p.depth),
        trajectory,
        depth_bins,
        peak_bin,
        criterion,
        representative_location,
        representative_row: representative_row(rep_cell)?,
        component_maxima,
    })
}

pub fn carrier_census(cards: &[ModelCard]) -> Result<BTreeMap<ComponentClass, usize>> {
    if cards.is_empty() {
        return Err(Error::Empty("card list"));
    }
    let mut out = BTreeMap::new();
    for c in cards {
        *out.entry(c.carrier.component).or_insert(0) += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCount {
    pub tier: Tier,
    pub lower: f64,
    pub upper: Option<f64>,
    pub count: usize,
}

/// Cross-model summary emitted by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub models: Vec<ReportModel>,
    pub tiers: Vec<TierCount>,
    pub carriers: BTreeMap<ComponentClass, usize>,
    pub passing: usize,
    pub failing: usize,
    pub matched_pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportModel {
    pub model_id: String,
    pub global_max: f64,
    pub tier: Tier,
    pub carrier: TapLocation,
    pub passes: Option<bool>,
}

/// Builds the report. `pairs` name model ids that must be present in
/// `cards`.
pub fn build_report(cards: &[ModelCard], pairs: &[(String, String)]) -> Result<Report> {
    let hist = tier_histogram(cards.iter().map(|c| c.global_max))?;
    let by_id: BTreeMap<&str, &ModelCard> = cards.iter().map(|c| (c.model_id.as_str(), c)).collect();
    let matched_pairs = pairs
        .iter()
        .map(|(a, b)| {
            let get = |id: &str| {
                by_id
                    .get(id)
                    .map(|c| c.global_max)
                    .ok_or_else(|| Error::InvalidInput(format!("matched pair names unknown model `{id}`")))
            };
            MatchedPair::new(a, get(a)?, b, get(b)?)
        })
        .collect::<Result<_>>()?;
    let verdicts: Vec<Option<bool>> = cards.iter().map(|c| c.criterion.as_ref().map(|r| r.passes)).collect();
    Ok(Report {
        models: cards
            .iter()
            .zip(&verdicts)
            .map(|(c, &passes)| ReportModel {
                model_id: c.model_id.clone(),
                global_max: c.global_max,
                tier: c.tier,
                carrier: c.carrier,
                passes,
            })
            .collect(),
        tiers: (0..TIER_COUNT as u8)
            .map(|i| TierCount {
                tier: Tier(i),
                lower: Tier(i).lower(),
                upper: Tier(i).upper(),
                count: hist[i as usize],
            })
            .collect(),
        carriers: if cards.is_empty() { BTreeMap::new() } else { carrier_census(cards)? },
        passing: verdicts.iter().filter(|v| **v == Some(true)).count(),
        failing: verdicts.iter().filter(|v| **v == Some(false)).count(),
        matched_pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityRun {
    pub size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub global_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeStability {
    pub size: usize,
    pub repeats: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single repeat.
    pub std: f64,
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRun>,
    pub sizes: Vec<SizeStability>,
}

impl StabilityReport {
    pub fn max_cv(&self) -> f64 {
        self.sizes.iter().map(|s| s.cv).fold(0.0, f64::max)
    }
}

/// Mean, sample std and coefficient of variation of `values`.
pub fn coefficient_of_variation(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("value list"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let cv = if mean == 0.0 { 0.0 } else { std / mean };
    Ok((mean, std, cv))
}

/// For each size and repeat `r` (seed `r + 1`), draws a stratified subsample
/// and records the `M` returned by `profile`.
pub fn run_stability(
    mut profile: impl FnMut(&[CorpusSample]) -> Result<f64>,
    corpus: &[CorpusSample],
    sizes: &[usize],
    repeats: usize,
) -> Result<StabilityReport> {
    if sizes.is_empty() || repeats == 0 {
        return Err(Error::InvalidInput("stability needs at least one size and one repeat".into()));
    }
    if let Some(&big) = sizes.iter().find(|&&s| s > corpus.len()) {
        return Err(Error::InvalidInput(format!(
            "subsample size {big} exceeds corpus of {}",
            corpus.len()
        )));
    }
    let mut runs = Vec::with_capacity(sizes.len() * repeats);
    let mut per_size = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut ms = Vec::with_capacity(repeats);
        for repeat in 0..repeats {
            let seed = repeat as u64 + 1;
            let subset = stratified_subsample(corpus, size, seed)?;
            let m = profile(&subset)?;
            ms.push(m);
            runs.push(StabilityRun {
                size,
                repeat,
                seed,
                global_max: m,
            });
        }
        let (mean, std, cv) = coefficient_of_variation(&ms)?;
        per_size.push(SizeStability {
            size,
            repeats,
            mean,
            std,
            cv,
        });
    }
    Ok(StabilityReport { runs, sizes: per_size })
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `model_id,layer,depth,peak`
pub fn write_trajectory_csv<W: Write>(w: W, cards: &[ModelCard]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["model_id", "layer", "depth", "peak"])?;
    for c in cards {
        for p in &c.trajectory {
            out.write_record([c.model_id.clone(), p.layer.to_string(), p.depth.to_string(), p.peak.to_string()])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// `model_id,bin,depth_lo,depth_hi,peak,is_peak_bin`; empty `peak` marks an
/// empty bin.
pub fn write_heatmap_csv<W: Write>(w: W, cards: &[ModelCard]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["model_id", "bin", "depth_lo", "depth_hi", "peak", "is_peak_bin"])?;
    for c in cards {
        let b = c.depth_bins.len() as f64;
        for (i, v) in c.depth_bins.iter().enumerate() {
            out.write_record([
                c.model_id.clone(),
                i.to_string(),
                (i as f64 / b).to_string(),
                ((i + 1) as f64 / b).to_string(),
                opt(*v),
                (c.peak_bin == Some(i)).to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// `model_id,passes,layer,kind,abs_value,local_ratio`
pub fn write_scatter_csv<W: Write>(w: W, cards: &[ModelCard]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["model_id", "passes", "layer", "kind", "abs_value", "local_ratio"])?;
    for c in cards {
        let Some(crit) = &c.criterion else { continue };
        for p in &crit.scatter {
            out.write_record([
                c.model_id.clone(),
                crit.passes.to_string(),
                p.layer.to_string(),
                p.kind.as_str().to_owned(),
                p.abs_value.to_string(),
                p.local_ratio.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// `tier,lower,upper,count`; empty `upper` is the open top tier.
pub fn write_tier_csv<W: Write>(w: W, report: &Report) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["tier", "lower", "upper", "count"])?;
    for t in &report.tiers {
        out.write_record([t.tier.0.to_string(), t.lower.to_string(), opt(t.upper), t.count.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// `first,second,m_first,m_second,ratio,lower`
pub fn write_pairs_csv<W: Write>(w: W, pairs: &[MatchedPair]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["first", "second", "m_first", "m_second", "ratio", "lower"])?;
    for p in pairs {
        out.write_record([
            p.first.clone(),
            p.second.clone(),
            p.m_first.to_string(),
            p.m_second.to_string(),
            p.ratio.to_string(),
            p.lower.clone().unwrap_or_default(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

//! End-to-end profiling: records in, statistics file and model card out.
//!
//! [`Profiler`] folds a record stream into per-(layer, component) cells in
//! arrival order. [`profile`] runs the toy model over a corpus, with forward
//! passes spread over a worker pool and records folded sequentially in
//! corpus order, so an in-process run and an ingest of its exported stream
//! see the same records in the same order and produce identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{build_card, run_stability, ModelCard, StabilityReport, DEFAULT_BINS};
use crate::corpus::CorpusSample;
use crate::criterion::{evaluate_model, CriterionConfig, FullScan};
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::quant::{layer_samples, run_probe, QuantProbeResult, ScaleStrategy, REFERENCE_DB};
use crate::record::{validate_record, ActivationRecord, ComponentClass, Payload, TapLocation, Violation};
use crate::stats::{CellAccumulator, SummaryReport, TokenEvidence};
use crate::topk::TopK;

/// Samples forwarded per parallel batch.
const BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileOptions {
    pub taps: BTreeSet<ComponentClass>,
    pub criterion: CriterionConfig,
    pub bins: usize,
    /// Check every hidden-state token against the criterion instead of the
    /// per-cell evidence. Falls back to evidence when summaries are ingested.
    pub full_scan: bool,
    /// Worker cap; `None` uses one worker per core.
    pub threads: Option<usize>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            taps: ComponentClass::ALL.into_iter().collect(),
            criterion: CriterionConfig::default(),
            bins: DEFAULT_BINS,
            full_scan: true,
            threads: None,
        }
    }
}

impl ProfileOptions {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config {
                field: "taps",
                reason: "tap filter must name at least one component".into(),
            });
        }
        if self.bins == 0 {
            return Err(Error::Config {
                field: "bins",
                reason: "must be at least 1".into(),
            });
        }
        if self.threads == Some(0) {
            return Err(Error::Config {
                field: "threads",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellEntry {
    pub layer: u32,
    pub component: ComponentClass,
    pub summary: SummaryReport,
    pub topk: TopK,
    pub peak_token: Option<TokenEvidence>,
    pub max_ratio_token: Option<TokenEvidence>,
}

/// One JSON document per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsFile {
    pub model_id: String,
    pub cells: Vec<CellEntry>,
    pub card: ModelCard,
}

#[derive(Debug, Clone)]
pub struct Profile {
    pub cells: BTreeMap<TapLocation, CellAccumulator>,
    pub stats: StatsFile,
    /// Records dropped because their component name is not one of the six.
    pub skipped_unknown: u64,
}

impl Profile {
    pub fn card(&self) -> &ModelCard {
        &self.stats.card
    }
}

pub struct Profiler {
    opts: ProfileOptions,
    model_id: Option<String>,
    cells: BTreeMap<TapLocation, CellAccumulator>,
    scan: FullScan,
    scan_complete: bool,
    skipped_unknown: u64,
}

impl Profiler {
    pub fn new(opts: ProfileOptions) -> Result<Self> {
        opts.validate()?;
        Ok(Profiler {
            scan: FullScan::new(opts.criterion),
            opts,
            model_id: None,
            cells: BTreeMap::new(),
            scan_complete: true,
            skipped_unknown: 0,
        })
    }

    pub fn observe(&mut self, rec: &ActivationRecord) -> Result<()> {
        let verdict = validate_record(rec);
        if !verdict.is_ok() {
            if verdict
                .violations
                .iter()
                .all(|v| matches!(v, Violation::UnknownComponent(_)))
            {
                self.skipped_unknown += 1;
                return Ok(());
            }
            return Err(Error::InvalidInput(format!(
                "record {}/{}@{}: {verdict}",
                rec.model_id, rec.sample_id, rec.layer
            )));
        }
        match &self.model_id {
            None => self.model_id = Some(rec.model_id.clone()),
            Some(id) if *id != rec.model_id => {
                return Err(Error::InvalidInput(format!(
                    "stream mixes models `{id}` and `{}`",
                    rec.model_id
                )))
            }
            Some(_) => {}
        }
        let loc = rec
            .location()
            .ok_or_else(|| Error::Invariant(format!("validated record has no location: {}", rec.sample_id)))?;
        if !self.opts.taps.contains(&loc.component) {
            return Ok(());
        }
        let hidden = loc.component == ComponentClass::HiddenState;
        let cell = self.cells.entry(loc).or_default();
        match &rec.payload {
            Payload::Raw(_) => {
                for tok in rec.raw_tokens() {
                    cell.update(tok)?;
                    if hidden && self.opts.full_scan {
                        self.scan.observe(loc.layer, tok);
                    }
                }
            }
            Payload::Summary(acc) => {
                cell.merge(acc);
                if hidden {
                    self.scan_complete = false;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Profile> {
        let model_id = self.model_id.ok_or(Error::NoRecords)?;
        if self.cells.is_empty() {
            return Err(Error::InvalidInput("no records matched the tap filter".into()));
        }
        let hidden: Vec<(u32, &CellAccumulator)> = self
            .cells
            .iter()
            .filter(|(l, c)| l.component == ComponentClass::HiddenState && !c.is_empty())
            .map(|(l, c)| (l.layer, c))
            .collect();
        let criterion = if hidden.is_empty() {
            None
        } else if self.opts.full_scan && self.scan_complete {
            Some(self.scan.finish()?)
        } else {
            Some(evaluate_model(hidden, &self.opts.criterion)?)
        };
        let card = build_card(&model_id, &self.cells, criterion, self.opts.bins)?;
        let cells = self
            .cells
            .iter()
            .map(|(loc, c)| CellEntry {
                layer: loc.layer,
                component: loc.component,
                summary: c.summary.report(),
                topk: c.topk.clone(),
                peak_token: c.peak_token.clone(),
                max_ratio_token: c.max_ratio_token.clone(),
            })
            .collect();
        Ok(Profile {
            stats: StatsFile { model_id, cells, card },
            cells: self.cells,
            skipped_unknown: self.skipped_unknown,
        })
    }
}

pub fn worker_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config {
            field: "threads",
            reason: e.to_string(),
        })
}

/// Runs `f` over the forward records of each sample, in corpus order.
fn for_each_trace(
    model: &ToyModel,
    corpus: &[CorpusSample],
    pool: &rayon::ThreadPool,
    mut f: impl FnMut(Vec<ActivationRecord>) -> Result<()>,
) -> Result<()> {
    for batch in corpus.chunks(BATCH) {
        let traces: Vec<Result<Vec<ActivationRecord>>> = pool.install(|| {
            batch
                .par_iter()
                .map(|s| model.forward(&s.id, &s.tokens).map(|t| t.records))
                .collect()
        });
        for recs in traces {
            f(recs?)?;
        }
    }
    Ok(())
}

/// Profiles `model` over `corpus`. Every profiled record is also passed to
/// `sink` when one is given (for stream export).
pub fn profile(
    model: &ToyModel,
    corpus: &[CorpusSample],
    opts: &ProfileOptions,
    mut sink: Option<&mut dyn FnMut(&ActivationRecord) -> Result<()>>,
) -> Result<Profile> {
    let pool = worker_pool(opts.threads)?;
    let mut profiler = Profiler::new(opts.clone())?;
    for_each_trace(model, corpus, &pool, |recs| {
        for rec in recs.iter().filter(|r| {
            r.location()
                .is_some_and(|l| opts.taps.contains(&l.component))
        }) {
            if let Some(sink) = sink.as_mut() {
                sink(rec)?;
            }
            profiler.observe(rec)?;
        }
        Ok(())
    })?;
    profiler.finish()
}

/// Folds a decoded record stream.
pub fn ingest(records: impl IntoIterator<Item = Result<ActivationRecord>>, opts: &ProfileOptions) -> Result<Profile> {
    let mut profiler = Profiler::new(opts.clone())?;
    for rec in records {
        profiler.observe(&rec?)?;
    }
    profiler.finish()
}

/// `M` for each stratified subsample, via a full profile of each.
pub fn stability(
    model: &ToyModel,
    corpus: &[CorpusSample],
    sizes: &[usize],
    repeats: usize,
    opts: &ProfileOptions,
) -> Result<StabilityReport> {
    let opts = ProfileOptions {
        full_scan: false,
        ..opts.clone()
    };
    run_stability(
        |subset| profile(model, subset, &opts, None).map(|p| p.stats.card.global_max),
        corpus,
        sizes,
        repeats,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeReport {
    pub model_id: String,
    pub layer: u32,
    pub component: ComponentClass,
    pub reference_db: f64,
    pub results: Vec<QuantProbeResult>,
}

/// Activations at `location` for the first `n` samples, one vector each.
pub fn collect_samples(
    model: &ToyModel,
    corpus: &[CorpusSample],
    location: TapLocation,
    n: usize,
    threads: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let pool = worker_pool(threads)?;
    let mut out = Vec::with_capacity(n);
    for_each_trace(model, &corpus[..n.min(corpus.len())], &pool, |recs| {
        out.extend(layer_samples(&recs, location)?);
        Ok(())
    })?;
    Ok(out)
}

/// Quantization probe over toy-model activations at `location`.
#[allow(clippy::too_many_arguments)]
pub fn probe_model(
    model: &ToyModel,
    corpus: &[CorpusSample],
    location: TapLocation,
    calib_n: usize,
    eval_n: usize,
    strategies: &[ScaleStrategy],
    global_peak: Option<f64>,
    threads: Option<usize>,
) -> Result<ProbeReport> {
    let samples = collect_samples(model, corpus, location, calib_n + eval_n, threads)?;
    Ok(ProbeReport {
        model_id: model.config().model_id.clone(),
        layer: location.layer,
        component: location.component,
        reference_db: REFERENCE_DB,
        results: run_probe(&samples, calib_n, eval_n, strategies, global_peak)?,
    })
}

/// Probe over a decoded record stream.
pub fn probe_records(
    records: &[ActivationRecord],
    location: TapLocation,
    calib_n: usize,
    eval_n: usize,
    strategies: &[ScaleStrategy],
    global_peak: Option<f64>,
) -> Result<ProbeReport> {
    let model_id = records.first().map(|r| r.model_id.clone()).ok_or(Error::NoRecords)?;
    let samples = layer_samples(records, location)?;
    Ok(ProbeReport {
        model_id,
        layer: location.layer,
        component: location.component,
        reference_db: REFERENCE_DB,
        results: run_probe(&samples, calib_n, eval_n, strategies, global_peak)?,
    })
}

/// `model_id,layer,component,strategy,threshold,scale,sqnr_db,peak_over_threshold,calib_n,eval_n,reference_db`
pub fn write_probe_csv<W: Write>(w: W, reports: &[ProbeReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model_id",
        "layer",
        "component",
        "strategy",
        "threshold",
        "scale",
        "sqnr_db",
        "peak_over_threshold",
        "calib_n",
        "eval_n",
        "reference_db",
    ])?;
    for r in reports {
        for p in &r.results {
            out.write_record([
                r.model_id.clone(),
                r.layer.to_string(),
                r.component.to_string(),
                p.strategy.to_string(),
                p.threshold.to_string(),
                p.scale.to_string(),
                p.sqnr_db.to_string(),
                p.peak_over_threshold.to_string(),
                p.calib_n.to_string(),
                p.eval_n.to_string(),
                r.reference_db.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Per-cell table for component and layer trajectories:
/// `model_id,layer,component,count,max_abs,mean,std,rms,mean_abs,q99,q999`
pub fn write_cells_csv<W: Write>(w: W, stats: &[StatsFile]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "model_id", "layer", "component", "count", "max_abs", "mean", "std", "rms", "mean_abs", "q99", "q999",
    ])?;
    for s in stats {
        for c in &s.cells {
            let q = |k: &str| c.summary.quantiles.get(k).map(f64::to_string).unwrap_or_default();
            out.write_record([
                s.model_id.clone(),
                c.layer.to_string(),
                c.component.to_string(),
                c.summary.count.to_string(),
                c.summary.max.abs().max(c.summary.min.abs()).to_string(),
                c.summary.mean.to_string(),
                c.summary.std.to_string(),
                c.summary.rms.to_string(),
                c.summary.mean_abs.to_string(),
                q("0.99"),
                q("0.999"),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

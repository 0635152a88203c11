//! `actscope` command-line front end.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 internal invariant
//! violation.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actscope_core::analysis::{self, ModelCard};
use actscope_core::corpus::{self, CorpusSample, MaterializeOptions, Source};
use actscope_core::criterion::CriterionConfig;
use actscope_core::model::{ModelConfig, ToyModel};
use actscope_core::pipeline::{self, ProfileOptions, StatsFile};
use actscope_core::quant::ScaleStrategy;
use actscope_core::wire::{Encoding, RecordReader, RecordWriter};
use actscope_core::{ActivationRecord, ComponentClass, Error as CoreError, TapLocation};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "actscope", version, about = "Activation dynamic-range measurement and reporting")]
struct Cli {
    /// Worker threads for forward passes (default: one per core).
    #[arg(long, global = true, env = "ACTSCOPE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an evaluation corpus and write it as JSON lines.
    Corpus(CorpusArgs),
    /// Run the toy model over a corpus and write statistics and a model card.
    Profile(ProfileArgs),
    /// Fold an external record stream into statistics and a model card.
    Ingest(IngestArgs),
    /// INT-8 quantization probe at one layer.
    Quantprobe(QuantArgs),
    /// Peak stability across stratified subsamples.
    Stability(StabilityArgs),
    /// Cross-model report and plot-ready CSVs from cards or statistics files.
    Report(ReportArgs),
}

#[derive(Args)]
struct CorpusArgs {
    /// Number of samples.
    #[arg(long)]
    total: usize,
    /// Draw uniform synthetic tokens (the default source).
    #[arg(long, conflicts_with = "manifest")]
    synthetic: bool,
    /// `category<TAB>path` manifest of local texts (byte tokenizer).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary for synthetic tokens.
    #[arg(long, default_value_t = 256)]
    vocab: u32,
    /// Cap sequence length (desk-scale runs).
    #[arg(long)]
    max_len: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct AnalysisArgs {
    /// Comma-separated component classes to tap (default: all six).
    #[arg(long, value_delimiter = ',')]
    taps: Vec<ComponentClass>,
    /// Normalized-depth bins.
    #[arg(long, default_value_t = analysis::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value_t = 100.0)]
    abs_threshold: f64,
    #[arg(long, default_value_t = 1000.0)]
    ratio_threshold: f64,
    /// Judge the criterion from per-layer evidence tokens only.
    #[arg(long)]
    evidence_only: bool,
}

impl AnalysisArgs {
    fn options(&self, threads: Option<usize>) -> Result<ProfileOptions> {
        let taps: BTreeSet<ComponentClass> = if self.taps.is_empty() {
            ComponentClass::ALL.into_iter().collect()
        } else {
            self.taps.iter().copied().collect()
        };
        Ok(ProfileOptions {
            taps,
            criterion: CriterionConfig::new(self.abs_threshold, self.ratio_threshold)?,
            bins: self.bins,
            full_scan: !self.evidence_only,
            threads,
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WireEncoding {
    Json,
    BinaryF32,
}

#[derive(Args)]
struct ProfileArgs {
    /// Model config (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Corpus dump from `actscope corpus`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for stats.json and card.json.
    #[arg(long)]
    out: PathBuf,
    /// Also write every profiled record to this stream file.
    #[arg(long)]
    export: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    encoding: WireEncoding,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Args)]
struct IngestArgs {
    /// Record stream file.
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Args)]
struct QuantArgs {
    /// Model config; used with --corpus.
    #[arg(long, requires = "corpus", conflicts_with = "records")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    corpus: Option<PathBuf>,
    /// Record stream with raw payloads, instead of a model run.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Statistics file supplying the peak layer and global peak.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    calib: usize,
    #[arg(long, default_value_t = 256)]
    eval: usize,
    /// `peak`, a hidden-state layer index, or `component@layer`.
    #[arg(long, default_value = "peak")]
    layer: String,
    /// Comma-separated: `maxabs`, `clip`, `clip:<p>`.
    #[arg(long, value_delimiter = ',', default_value = "maxabs,clip")]
    strategy: Vec<ScaleStrategy>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1000,2000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analysis: AnalysisArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Model cards or statistics files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Matched pairs as `model_a:model_b`, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    /// Print the tier histogram.
    #[arg(long)]
    tiers: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let internal = err
                .chain()
                .find_map(|e| e.downcast_ref::<CoreError>())
                .is_some_and(CoreError::is_internal);
            ExitCode::from(if internal { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == Some(0) {
        bail!("--threads / ACTSCOPE_THREADS must be at least 1");
    }
    match cli.command {
        Command::Corpus(a) => cmd_corpus(a),
        Command::Profile(a) => cmd_profile(a, cli.threads),
        Command::Ingest(a) => cmd_ingest(a, cli.threads),
        Command::Quantprobe(a) => cmd_quantprobe(a, cli.threads),
        Command::Stability(a) => cmd_stability(a, cli.threads),
        Command::Report(a) => cmd_report(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> actscope_core::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ToyModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ModelConfig::from_toml(&text).with_context(|| format!("model config {}", path.display()))?;
    Ok(ToyModel::build(&cfg)?)
}

fn load_corpus(path: &Path) -> Result<Vec<CorpusSample>> {
    corpus::read_dump(open(path)?).with_context(|| format!("corpus {}", path.display()))
}

fn read_records(path: &Path) -> Result<RecordReader<BufReader<File>>> {
    RecordReader::new(open(path)?).with_context(|| format!("record stream {}", path.display()))
}

fn cmd_corpus(a: CorpusArgs) -> Result<()> {
    let plan = corpus::default_plan(a.total)?;
    let source = match a.manifest {
        Some(path) => Source::Manifest { path },
        None => Source::Synthetic {
            seed: a.seed,
            vocab: a.vocab,
        },
    };
    let samples = corpus::materialize(
        &plan,
        &MaterializeOptions {
            source,
            max_len: a.max_len,
        },
    )?;
    match &a.out {
        Some(path) => {
            let mut w = create(path)?;
            corpus::write_dump(&mut w, &samples)?;
            w.flush()?;
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            corpus::write_dump(&mut w, &samples)?;
            w.flush()?;
        }
    }
    let counts: Vec<String> = plan
        .category_counts
        .iter()
        .map(|(c, n)| format!("{c}={n}"))
        .collect();
    eprintln!(
        "{} samples ({}); planned mean length {:.2}, {} tokens",
        samples.len(),
        counts.join(" "),
        plan.mean_length(),
        plan.total_tokens()
    );
    Ok(())
}

fn write_profile(out: &Path, stats: &StatsFile) -> Result<()> {
    write_json(&out.join("stats.json"), stats)?;
    write_json(&out.join("card.json"), &stats.card)?;
    let card = &stats.card;
    let verdict = match &card.criterion {
        Some(c) if c.passes => "passes".to_owned(),
        Some(c) => format!("fails ({:?})", c.failure_mode.expect("failing result has a mode")),
        None => "not evaluated".to_owned(),
    };
    println!(
        "{}: M = {} at {} (tier {}); criterion {verdict}",
        card.model_id, card.global_max, card.carrier, card.tier.0
    );
    Ok(())
}

fn cmd_profile(a: ProfileArgs, threads: Option<usize>) -> Result<()> {
    let model = load_model(&a.model)?;
    let samples = load_corpus(&a.corpus)?;
    let opts = a.analysis.options(threads)?;
    let profile = match &a.export {
        Some(path) => {
            let encoding = match a.encoding {
                WireEncoding::Json => Encoding::Json,
                WireEncoding::BinaryF32 => Encoding::BinaryF32,
            };
            let mut writer = RecordWriter::new(create(path)?, encoding)?;
            let mut sink = |r: &ActivationRecord| writer.write(r);
            let p = pipeline::profile(&model, &samples, &opts, Some(&mut sink))?;
            writer.flush()?;
            p
        }
        None => pipeline::profile(&model, &samples, &opts, None)?,
    };
    write_profile(&a.out, &profile.stats)
}

fn cmd_ingest(a: IngestArgs, threads: Option<usize>) -> Result<()> {
    let reader = read_records(&a.records)?;
    let profile = pipeline::ingest(reader, &a.analysis.options(threads)?)
        .with_context(|| format!("ingesting {}", a.records.display()))?;
    if profile.skipped_unknown > 0 {
        eprintln!("skipped {} record(s) with unknown component names", profile.skipped_unknown);
    }
    write_profile(&a.out, &profile.stats)
}

fn parse_location(spec: &str) -> Result<TapLocation> {
    if let Some((component, layer)) = spec.split_once('@') {
        let component: ComponentClass = component.parse()?;
        return Ok(TapLocation::new(layer.parse().context("layer index")?, component)?);
    }
    Ok(TapLocation::hidden(spec.parse().with_context(|| format!("bad --layer `{spec}`"))?))
}

fn load_stats_card(path: &Path) -> Result<ModelCard> {
    let stats: StatsFile =
        serde_json::from_reader(open(path)?).with_context(|| format!("statistics file {}", path.display()))?;
    Ok(stats.card)
}

fn cmd_quantprobe(a: QuantArgs, threads: Option<usize>) -> Result<()> {
    let card = a.stats.as_deref().map(load_stats_card).transpose()?;
    let report = match (&a.model, &a.corpus, &a.records) {
        (Some(model), Some(corpus), None) => {
            let model = load_model(model)?;
            let samples = load_corpus(corpus)?;
            let card = match card {
                Some(c) => c,
                None if a.layer == "peak" => {
                    let opts = ProfileOptions {
                        threads,
                        full_scan: false,
                        ..Default::default()
                    };
                    pipeline::profile(&model, &samples, &opts, None)?.stats.card
                }
                None => {
                    let loc = parse_location(&a.layer)?;
                    return finish_probe(
                        &a,
                        pipeline::probe_model(&model, &samples, loc, a.calib, a.eval, &a.strategy, None, threads)?,
                    );
                }
            };
            let loc = probe_location(&a.layer, &card)?;
            pipeline::probe_model(
                &model,
                &samples,
                loc,
                a.calib,
                a.eval,
                &a.strategy,
                Some(card.global_max),
                threads,
            )?
        }
        (None, None, Some(records)) => {
            let records: Vec<ActivationRecord> = read_records(records)?.collect::<actscope_core::Result<_>>()?;
            let card = match card {
                Some(c) => c,
                None => pipeline::ingest(records.iter().cloned().map(Ok), &ProfileOptions::default())?.stats.card,
            };
            let loc = probe_location(&a.layer, &card)?;
            pipeline::probe_records(&records, loc, a.calib, a.eval, &a.strategy, Some(card.global_max))?
        }
        _ => bail!("quantprobe needs either --model with --corpus, or --records"),
    };
    finish_probe(&a, report)
}

fn probe_location(spec: &str, card: &ModelCard) -> Result<TapLocation> {
    if spec == "peak" {
        let layer = card
            .peak_layer
            .ok_or_else(|| anyhow!("no hidden-state trajectory to locate the peak layer; pass --layer"))?;
        Ok(TapLocation::hidden(layer))
    } else {
        parse_location(spec)
    }
}

fn finish_probe(a: &QuantArgs, report: pipeline::ProbeReport) -> Result<()> {
    write_json(&a.out.join("probe.json"), &report)?;
    write_csv(&a.out.join("probe.csv"), |w| {
        pipeline::write_probe_csv(w, std::slice::from_ref(&report))
    })?;
    for r in &report.results {
        println!(
            "{}@{} {}: threshold {} sqnr {} dB, peak/threshold {:.1}",
            report.component, report.layer, r.strategy, r.threshold, r.sqnr_db, r.peak_over_threshold
        );
    }
    Ok(())
}

fn cmd_stability(a: StabilityArgs, threads: Option<usize>) -> Result<()> {
    let model = load_model(&a.model)?;
    let samples = load_corpus(&a.corpus)?;
    let report = pipeline::stability(&model, &samples, &a.sizes, a.repeats, &a.analysis.options(threads)?)?;
    write_json(&a.out.join("stability.json"), &report)?;
    let mut w = create(&a.out.join("stability.csv"))?;
    writeln!(w, "size,repeats,mean,std,cv")?;
    for s in &report.sizes {
        writeln!(w, "{},{},{},{},{}", s.size, s.repeats, s.mean, s.std, s.cv)?;
        println!("size {}: mean M {:.4}, CV {:.2}%", s.size, s.mean, 100.0 * s.cv);
    }
    w.flush()?;
    Ok(())
}

/// A card file, or a statistics file whose card is used.
fn load_card(path: &Path) -> Result<(ModelCard, Option<StatsFile>)> {
    let value: serde_json::Value =
        serde_json::from_reader(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    if value.get("card").is_some() {
        let stats: StatsFile =
            serde_json::from_value(value).with_context(|| format!("statistics file {}", path.display()))?;
        Ok((stats.card.clone(), Some(stats)))
    } else {
        let card = serde_json::from_value(value).with_context(|| format!("model card {}", path.display()))?;
        Ok((card, None))
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut cards = Vec::new();
    let mut stats = Vec::new();
    for path in &a.inputs {
        let (card, s) = load_card(path)?;
        cards.push(card);
        stats.extend(s);
    }
    let pairs = a
        .pairs
        .iter()
        .map(|p| {
            p.split_once(':')
                .map(|(x, y)| (x.to_owned(), y.to_owned()))
                .ok_or_else(|| anyhow!("pair `{p}` is not `model_a:model_b`"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = analysis::build_report(&cards, &pairs)?;

    write_json(&a.out.join("report.json"), &report)?;
    write_csv(&a.out.join("tiers.csv"), |w| analysis::write_tier_csv(w, &report))?;
    write_csv(&a.out.join("trajectory.csv"), |w| analysis::write_trajectory_csv(w, &cards))?;
    write_csv(&a.out.join("heatmap.csv"), |w| analysis::write_heatmap_csv(w, &cards))?;
    write_csv(&a.out.join("scatter.csv"), |w| analysis::write_scatter_csv(w, &cards))?;
    write_csv(&a.out.join("pairs.csv"), |w| analysis::write_pairs_csv(w, &report.matched_pairs))?;
    if !stats.is_empty() {
        write_csv(&a.out.join("cells.csv"), |w| pipeline::write_cells_csv(w, &stats))?;
    }

    if a.tiers {
        for t in &report.tiers {
            println!("tier {} {}: {}", t.tier.0, t.tier.label(), t.count);
        }
    }
    for p in &report.matched_pairs {
        println!(
            "{} vs {}: {:.3}x, lower: {}",
            p.first,
            p.second,
            p.ratio,
            p.lower.as_deref().unwrap_or("neither")
        );
    }
    println!(
        "{} model(s): {} pass, {} fail",
        report.models.len(),
        report.passing,
        report.failing
    );
    Ok(())
}

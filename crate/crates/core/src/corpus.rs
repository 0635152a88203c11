//! Evaluation corpora with fixed category and length proportions.
//!
//! A [`CorpusPlan`] fixes how many samples fall in each content category and
//! each length bucket (largest-remainder rounding, so counts always sum to the
//! total). [`materialize`] turns a plan into token sequences, either from a
//! seeded uniform generator or from local texts through a byte-level
//! tokenizer. Bucket labels are assigned to samples by a seeded shuffle.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MathSci,
    Code,
    WebEn,
    Knowledge,
    Zh,
    LowResource,
    ExtraEn,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::MathSci,
        Category::Code,
        Category::WebEn,
        Category::Knowledge,
        Category::Zh,
        Category::LowResource,
        Category::ExtraEn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MathSci => "math_sci",
            Category::Code => "code",
            Category::WebEn => "web_en",
            Category::Knowledge => "knowledge",
            Category::Zh => "zh",
            Category::LowResource => "low_resource",
            Category::ExtraEn => "extra_en",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown category `{s}`")))
    }
}

pub const BUCKETS: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const CATEGORY_WEIGHTS: [f64; 7] = [0.17, 0.17, 0.17, 0.17, 0.08, 0.06, 0.18];
pub const LENGTH_WEIGHTS: [f64; 5] = [0.01, 0.01, 0.02, 0.03, 0.93];

/// Quotas within this distance of an integer count as that integer, so
/// decimal weights like 0.17 × 5000 are not floored to 849.
const QUOTA_SNAP: f64 = 1e-9;

/// Largest-remainder apportionment of `total` over real weights. Leftover
/// units go to the largest fractional parts, lower index first on ties.
pub fn apportion(total: usize, weights: &[f64]) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(format!("weights must be finite and non-negative: {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if total == 0 {
        return Ok(vec![0; weights.len()]);
    }
    if !(sum > 0.0) {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let quotas: Vec<f64> = weights
        .iter()
        .map(|w| {
            let q = w / sum * total as f64;
            if (q - q.round()).abs() < QUOTA_SNAP {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let floors: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let remainders: Vec<f64> = quotas.iter().zip(&floors).map(|(q, f)| q - *f as f64).collect();
    Ok(distribute(total, floors, |a, b| remainders[b].total_cmp(&remainders[a])))
}

/// Integer version of [`apportion`]: exact for count-valued weights.
pub fn apportion_counts(total: usize, counts: &[usize]) -> Result<Vec<usize>> {
    let sum: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Ok(vec![0; counts.len()]);
    }
    if sum == 0 {
        return Err(Error::InvalidInput("weights sum to zero".into()));
    }
    let floors: Vec<usize> = counts.iter().map(|&c| (c as u128 * total as u128 / sum) as usize).collect();
    let rems: Vec<u128> = counts.iter().map(|&c| c as u128 * total as u128 % sum).collect();
    Ok(distribute(total, floors, |a, b| rems[b].cmp(&rems[a])))
}

fn distribute(total: usize, mut counts: Vec<usize>, by_remainder: impl Fn(usize, usize) -> std::cmp::Ordering) -> Vec<usize> {
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| by_remainder(a, b).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub total: usize,
    pub category_counts: BTreeMap<Category, usize>,
    pub length_buckets: BTreeMap<usize, usize>,
}

impl CorpusPlan {
    pub fn mean_length(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.total_tokens() as f64 / self.total as f64
    }

    pub fn total_tokens(&self) -> u64 {
        self.length_buckets.iter().map(|(&b, &n)| (b * n) as u64).sum()
    }
}

pub fn build_plan(total: usize, category_weights: &[f64; 7], length_weights: &[f64; 5]) -> Result<CorpusPlan> {
    let cats = apportion(total, category_weights)?;
    let lens = apportion(total, length_weights)?;
    Ok(CorpusPlan {
        total,
        category_counts: Category::ALL.into_iter().zip(cats).collect(),
        length_buckets: BUCKETS.into_iter().zip(lens).collect(),
    })
}

/// Plan with the default category and length proportions.
pub fn default_plan(total: usize) -> Result<CorpusPlan> {
    build_plan(total, &CATEGORY_WEIGHTS, &LENGTH_WEIGHTS)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub id: String,
    pub category: Category,
    pub bucket: usize,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Uniform token ids in `0..vocab`, seeded per category.
    Synthetic { seed: u64, vocab: u32 },
    /// `category<TAB>path` lines; texts tokenized one token per byte.
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterializeOptions {
    pub source: Source,
    /// Caps every sequence at this many tokens; `None` keeps bucket lengths.
    pub max_len: Option<usize>,
}

const CATEGORY_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;
/// Vocabulary of the byte-level tokenizer used for manifest texts.
pub const BYTE_TOKENIZER_VOCAB: u32 = 256;

impl MaterializeOptions {
    fn length_for(&self, bucket: usize) -> usize {
        self.max_len.map_or(bucket, |m| bucket.min(m))
    }

    fn assignment_seed(&self) -> u64 {
        match self.source {
            Source::Synthetic { seed, .. } => seed,
            Source::Manifest { .. } => 0,
        }
    }
}

/// Bucket label for every sample slot, in category order.
fn bucket_assignment(plan: &CorpusPlan, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = plan
        .length_buckets
        .iter()
        .flat_map(|(&b, &n)| std::iter::repeat_n(b, n))
        .collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

fn check_plan(plan: &CorpusPlan) -> Result<()> {
    let cats: usize = plan.category_counts.values().sum();
    let lens: usize = plan.length_buckets.values().sum();
    if cats != plan.total || lens != plan.total {
        return Err(Error::InvalidInput(format!(
            "plan counts do not sum to total {}: categories {cats}, lengths {lens}",
            plan.total
        )));
    }
    Ok(())
}

pub fn materialize(plan: &CorpusPlan, opts: &MaterializeOptions) -> Result<Vec<CorpusSample>> {
    check_plan(plan)?;
    if opts.max_len == Some(0) {
        return Err(Error::Config {
            field: "max_len",
            reason: "must be at least 1".into(),
        });
    }
    let mut buckets = bucket_assignment(plan, opts.assignment_seed()).into_iter();
    let mut slots: Vec<(Category, usize, usize)> = Vec::with_capacity(plan.total);
    for (&cat, &n) in &plan.category_counts {
        for i in 0..n {
            slots.push((cat, i, buckets.next().expect("length counts match total")));
        }
    }
    let sample_id = |cat: Category, i: usize| format!("{cat}-{i:05}");

    match &opts.source {
        Source::Synthetic { seed, vocab } => {
            if *vocab == 0 {
                return Err(Error::Config {
                    field: "vocab",
                    reason: "must be at least 1".into(),
                });
            }
            let mut rngs: BTreeMap<Category, ChaCha8Rng> = Category::ALL
                .into_iter()
                .map(|c| {
                    let offset = (c.index() as u64 + 1).wrapping_mul(CATEGORY_SEED_STRIDE);
                    (c, ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset)))
                })
                .collect();
            Ok(slots
                .into_iter()
                .map(|(cat, i, bucket)| {
                    let rng = rngs.get_mut(&cat).expect("every category seeded");
                    let tokens = (0..opts.length_for(bucket)).map(|_| rng.random_range(0..*vocab)).collect();
                    CorpusSample {
                        id: sample_id(cat, i),
                        category: cat,
                        bucket,
                        tokens,
                    }
                })
                .collect())
        }
        Source::Manifest { path } => {
            let texts = read_manifest(path)?;
            let short: Vec<String> = plan
                .category_counts
                .iter()
                .filter_map(|(cat, &need)| {
                    let have = texts.get(cat).map_or(0, Vec::len);
                    (have < need).then(|| format!("{cat}: need {need} have {have}"))
                })
                .collect();
            if !short.is_empty() {
                return Err(Error::Shortfall(short.join("; ")));
            }
            slots
                .into_iter()
                .map(|(cat, i, bucket)| {
                    let text_path = &texts[&cat][i];
                    let bytes = std::fs::read(text_path).map_err(|e| Error::io(text_path, e))?;
                    let len = opts.length_for(bucket);
                    if bytes.len() < len {
                        return Err(Error::InvalidInput(format!(
                            "{}: {} bytes, bucket needs {len}",
                            text_path.display(),
                            bytes.len()
                        )));
                    }
                    Ok(CorpusSample {
                        id: sample_id(cat, i),
                        category: cat,
                        bucket,
                        tokens: bytes[..len].iter().map(|&b| u32::from(b)).collect(),
                    })
                })
                .collect()
        }
    }
}

/// Text paths per category, relative paths resolved against the manifest's
/// directory.
fn read_manifest(path: &Path) -> Result<BTreeMap<Category, Vec<PathBuf>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out: BTreeMap<Category, Vec<PathBuf>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (cat, rel) = line.split_once('\t').ok_or_else(|| Error::Malformed {
            line: n + 1,
            reason: "expected `category<TAB>path`".into(),
        })?;
        let cat: Category = cat.trim().parse().map_err(|e: Error| Error::Malformed {
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.entry(cat).or_default().push(base.join(rel.trim()));
    }
    Ok(out)
}

/// Category-proportional subsample, uniform within each category. The
/// result keeps the parent's order.
pub fn stratified_subsample(corpus: &[CorpusSample], n: usize, seed: u64) -> Result<Vec<CorpusSample>> {
    if n > corpus.len() {
        return Err(Error::InvalidInput(format!(
            "subsample of {n} requested from a corpus of {}",
            corpus.len()
        )));
    }
    let mut members: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        members.entry(s.category).or_default().push(i);
    }
    let sizes: Vec<usize> = members.values().map(Vec::len).collect();
    let quotas = apportion_counts(n, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for (idx, quota) in members.values().zip(quotas) {
        chosen.extend(rand::seq::index::sample(&mut rng, idx.len(), quota).into_iter().map(|j| idx[j]));
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| corpus[i].clone()).collect())
}

pub fn category_counts(corpus: &[CorpusSample]) -> BTreeMap<Category, usize> {
    let mut out: BTreeMap<Category, usize> = Category::ALL.into_iter().map(|c| (c, 0)).collect();
    for s in corpus {
        *out.entry(s.category).or_default() += 1;
    }
    out
}

/// One JSON object per line: `{id, category, bucket, tokens}`.
pub fn write_dump(mut w: impl Write, corpus: &[CorpusSample]) -> Result<()> {
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io("<corpus dump>", e))?;
    }
    Ok(())
}

pub fn read_dump(r: impl BufRead) -> Result<Vec<CorpusSample>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus dump>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: CorpusSample = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: n + 1,
            reason: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

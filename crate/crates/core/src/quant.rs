//! Per-tensor symmetric INT-8 quantization probe.
//!
//! The grid is `{-127, …, 127} × scale` with `scale = threshold / 127`;
//! rounding is half-to-even. SQNR is pooled over every evaluation value:
//! `10·log10(Σx² / Σ(x − x̂)²)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exact::ExactSum;
use crate::record::{ActivationRecord, Payload, TapLocation};
use crate::stats::nearest_rank;

pub const QMAX: f64 = 127.0;
pub const DEFAULT_CLIP: f64 = 0.999;
/// Reference SQNR line carried alongside probe CSVs.
pub const REFERENCE_DB: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleStrategy {
    MaxAbs,
    PercentileClip(f64),
}

impl ScaleStrategy {
    pub fn clip(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidInput(format!("clip percentile {p} outside (0, 1)")));
        }
        Ok(ScaleStrategy::PercentileClip(p))
    }

    pub fn defaults() -> Vec<ScaleStrategy> {
        vec![ScaleStrategy::MaxAbs, ScaleStrategy::PercentileClip(DEFAULT_CLIP)]
    }
}

impl fmt::Display for ScaleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleStrategy::MaxAbs => f.write_str("maxabs"),
            ScaleStrategy::PercentileClip(p) => write!(f, "clip:{p}"),
        }
    }
}

impl FromStr for ScaleStrategy {
    type Err = Error;

    /// `maxabs`, `clip` (99.9%), or `clip:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "maxabs" | "max_abs" => Ok(ScaleStrategy::MaxAbs),
            "clip" => Ok(ScaleStrategy::PercentileClip(DEFAULT_CLIP)),
            other => {
                let p = other
                    .strip_prefix("clip:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("unknown strategy `{other}`")))?;
                ScaleStrategy::clip(p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub scale: f64,
}

/// Derives the clipping threshold and grid scale from calibration values.
pub fn calibrate_scale(calib: &[f64], strategy: ScaleStrategy) -> Result<Calibration> {
    if calib.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if calib.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("calibration set contains non-finite values".into()));
    }
    let threshold = match strategy {
        ScaleStrategy::MaxAbs => calib.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        ScaleStrategy::PercentileClip(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidInput(format!("clip percentile {p} outside (0, 1)")));
            }
            let mut abs: Vec<f64> = calib.iter().map(|v| v.abs()).collect();
            abs.sort_unstable_by(f64::total_cmp);
            nearest_rank(&abs, p)
        }
    };
    if threshold <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "calibration threshold is zero under {strategy} (all-zero calibration set?)"
        )));
    }
    Ok(Calibration {
        threshold,
        scale: threshold / QMAX,
    })
}

/// `clamp(round_half_even(x / scale), -127, 127) · scale` elementwise.
pub fn quantize_dequantize(x: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    Ok(x
        .iter()
        .map(|&v| (v / scale).round_ties_even().clamp(-QMAX, QMAX) * scale)
        .collect())
}

/// Signal-to-quantization-noise ratio; `Exact` when reconstruction is lossless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sqnr {
    Db(f64),
    Exact,
}

impl Sqnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Sqnr::Db(v) => Some(v),
            Sqnr::Exact => None,
        }
    }
}

impl fmt::Display for Sqnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sqnr::Db(v) => write!(f, "{v}"),
            Sqnr::Exact => f.write_str("exact"),
        }
    }
}

impl Serialize for Sqnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sqnr::Db(v) => s.serialize_f64(*v),
            Sqnr::Exact => s.serialize_str("exact"),
        }
    }
}

impl<'de> Deserialize<'de> for Sqnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Tag(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Sqnr::Db(v)),
            Repr::Tag(t) if t == "exact" => Ok(Sqnr::Exact),
            Repr::Tag(t) => Err(serde::de::Error::custom(format!("bad sqnr `{t}`"))),
        }
    }
}

pub fn sqnr(x: &[f64], x_hat: &[f64]) -> Result<Sqnr> {
    if x.len() != x_hat.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} signal values, {} reconstructed",
            x.len(),
            x_hat.len()
        )));
    }
    let mut signal = ExactSum::new();
    let mut noise = ExactSum::new();
    for (&a, &b) in x.iter().zip(x_hat) {
        signal.add_square(a);
        noise.add_square(a - b);
    }
    let (signal, noise) = (signal.value(), noise.value());
    if signal == 0.0 {
        return Err(Error::InvalidInput("signal is all zero".into()));
    }
    if noise == 0.0 {
        return Ok(Sqnr::Exact);
    }
    Ok(Sqnr::Db(10.0 * (signal / noise).log10()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantProbeResult {
    pub strategy: ScaleStrategy,
    pub threshold: f64,
    pub scale: f64,
    pub sqnr_db: Sqnr,
    pub peak_over_threshold: f64,
    pub calib_n: usize,
    pub eval_n: usize,
}

/// Calibrates on the first `calib_n` samples, evaluates on the next
/// `eval_n`. `global_peak` defaults to the largest magnitude in those
/// samples.
pub fn run_probe(
    samples: &[Vec<f64>],
    calib_n: usize,
    eval_n: usize,
    strategies: &[ScaleStrategy],
    global_peak: Option<f64>,
) -> Result<Vec<QuantProbeResult>> {
    let need = calib_n + eval_n;
    if calib_n == 0 || eval_n == 0 || samples.len() < need {
        return Err(Error::InsufficientSamples {
            need,
            have: samples.len(),
            calib: calib_n,
            eval: eval_n,
        });
    }
    let calib: Vec<f64> = samples[..calib_n].concat();
    let eval: Vec<f64> = samples[calib_n..need].concat();
    let peak = global_peak.unwrap_or_else(|| calib.iter().chain(&eval).fold(0.0f64, |m, v| m.max(v.abs())));

    strategies
        .iter()
        .map(|&strategy| {
            let cal = calibrate_scale(&calib, strategy)?;
            let x_hat = quantize_dequantize(&eval, cal.scale)?;
            Ok(QuantProbeResult {
                strategy,
                threshold: cal.threshold,
                scale: cal.scale,
                sqnr_db: sqnr(&eval, &x_hat)?,
                peak_over_threshold: peak / cal.threshold,
                calib_n,
                eval_n,
            })
        })
        .collect()
}

/// Raw activations at `location`, one flat vector per sample in order of
/// first appearance.
pub fn layer_samples<'a>(
    records: impl IntoIterator<Item = &'a ActivationRecord>,
    location: TapLocation,
) -> Result<Vec<Vec<f64>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_sample: std::collections::HashMap<&str, Vec<f64>> = std::collections::HashMap::new();
    for rec in records {
        if rec.location() != Some(location) {
            continue;
        }
        let Payload::Raw(values) = &rec.payload else {
            return Err(Error::InvalidInput(format!(
                "quantization probe needs raw payloads at {location}, sample {} is a summary",
                rec.sample_id
            )));
        };
        let slot = by_sample.entry(&rec.sample_id).or_insert_with(|| {
            order.push(&rec.sample_id);
            Vec::new()
        });
        slot.extend_from_slice(values);
    }
    if order.is_empty() {
        return Err(Error::MissingLocation(location.to_string()));
    }
    Ok(order.into_iter().map(|s| by_sample.remove(s).expect("present")).collect())
}

//! Shared data model for captured activation tensors.
//!
//! Records are produced by the toy engine, by external capture adapters, and
//! read back by ingest; all three paths agree on these types and on
//! [`validate_record`].

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::stats::CellAccumulator;

/// The six captured tensor classes. Declaration order is the tie-break
/// order used when two cells attain the same global maximum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentClass {
    Embedding,
    HiddenState,
    AttentionOutput,
    MlpOutput,
    GatePreActivation,
    FinalNorm,
}

impl ComponentClass {
    pub const ALL: [ComponentClass; 6] = [
        ComponentClass::Embedding,
        ComponentClass::HiddenState,
        ComponentClass::AttentionOutput,
        ComponentClass::MlpOutput,
        ComponentClass::GatePreActivation,
        ComponentClass::FinalNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentClass::Embedding => "embedding",
            ComponentClass::HiddenState => "hidden_state",
            ComponentClass::AttentionOutput => "attention_output",
            ComponentClass::MlpOutput => "mlp_output",
            ComponentClass::GatePreActivation => "gate_pre_activation",
            ComponentClass::FinalNorm => "final_norm",
        }
    }

    /// Components that exist once per model rather than once per layer.
    pub fn is_model_level(self) -> bool {
        matches!(self, ComponentClass::Embedding | ComponentClass::FinalNorm)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ComponentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComponentClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown component `{s}`")))
    }
}

/// Where a tensor was tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TapLocation {
    pub layer: u32,
    pub component: ComponentClass,
}

impl TapLocation {
    pub fn new(layer: u32, component: ComponentClass) -> Result<Self> {
        if component.is_model_level() && layer != 0 {
            return Err(Error::InvalidInput(format!(
                "{component} location must carry layer 0, got {layer}"
            )));
        }
        Ok(TapLocation { layer, component })
    }

    pub fn hidden(layer: u32) -> Self {
        TapLocation {
            layer,
            component: ComponentClass::HiddenState,
        }
    }

    /// Ordering used for tie-breaks: component declaration order, then layer.
    pub fn tie_key(&self) -> (ComponentClass, u32) {
        (self.component, self.layer)
    }
}

impl fmt::Display for TapLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.component, self.layer)
    }
}

/// The component field as it appears on the wire. Unknown names survive
/// decoding so that validation can report them instead of aborting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComponentField {
    Known(ComponentClass),
    Unknown(String),
}

impl From<ComponentClass> for ComponentField {
    fn from(c: ComponentClass) -> Self {
        ComponentField::Known(c)
    }
}

impl Serialize for ComponentField {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ComponentField::Known(c) => s.serialize_str(c.as_str()),
            ComponentField::Unknown(name) => s.serialize_str(name),
        }
    }
}

impl<'de> Deserialize<'de> for ComponentField {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Ok(match name.parse::<ComponentClass>() {
            Ok(c) => ComponentField::Known(c),
            Err(_) => ComponentField::Unknown(name),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// `tokens × dim` values, row-major by token.
    Raw(Vec<f64>),
    /// A pre-aggregated accumulator snapshot for the whole chunk.
    Summary(Box<CellAccumulator>),
}

/// One captured tensor event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub model_id: String,
    pub sample_id: String,
    pub layer: i64,
    pub component: ComponentField,
    pub tokens: u64,
    pub dim: u64,
    pub payload: Payload,
}

impl ActivationRecord {
    pub fn raw(
        model_id: impl Into<String>,
        sample_id: impl Into<String>,
        location: TapLocation,
        tokens: usize,
        dim: usize,
        values: Vec<f64>,
    ) -> Self {
        ActivationRecord {
            model_id: model_id.into(),
            sample_id: sample_id.into(),
            layer: i64::from(location.layer),
            component: location.component.into(),
            tokens: tokens as u64,
            dim: dim as u64,
            payload: Payload::Raw(values),
        }
    }

    /// The tap location, if layer and component are legal.
    pub fn location(&self) -> Option<TapLocation> {
        let ComponentField::Known(component) = self.component else {
            return None;
        };
        let layer = u32::try_from(self.layer).ok()?;
        TapLocation::new(layer, component).ok()
    }

    /// Per-token views over a raw payload; empty for summary payloads.
    pub fn raw_tokens(&self) -> impl Iterator<Item = TokenView<'_>> {
        let (values, dim) = match &self.payload {
            Payload::Raw(v) if self.dim > 0 => (v.as_slice(), self.dim as usize),
            _ => (&[][..], 1),
        };
        values
            .chunks_exact(dim)
            .enumerate()
            .map(move |(i, values)| TokenView {
                sample_id: &self.sample_id,
                token_index: i as u32,
                values,
            })
    }
}

/// The hidden vector of a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVector {
    pub values: Vec<f64>,
    pub token_index: u32,
    pub sample_id: String,
}

impl TokenVector {
    pub fn new(values: Vec<f64>, token_index: u32, sample_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("token vector has zero dimensions".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at dim {i}")));
        }
        Ok(TokenVector {
            values,
            token_index,
            sample_id: sample_id.into(),
        })
    }

    pub fn view(&self) -> TokenView<'_> {
        TokenView {
            sample_id: &self.sample_id,
            token_index: self.token_index,
            values: &self.values,
        }
    }
}

/// Borrowed form of [`TokenVector`] used on the hot accumulation path.
#[derive(Debug, Clone, Copy)]
pub struct TokenView<'a> {
    pub sample_id: &'a str,
    pub token_index: u32,
    pub values: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    PayloadLength { expected: u64, actual: u64 },
    NonFinite { first_index: usize, count: usize },
    LayerIndex { layer: i64, reason: &'static str },
    UnknownComponent(String),
    EmptyShape { tokens: u64, dim: u64 },
    ObservationCount { expected: u64, actual: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PayloadLength { expected, actual } => {
                write!(f, "payload length: expected {expected} values, found {actual}")
            }
            Violation::NonFinite { first_index, count } => {
                write!(f, "non-finite value: {count} value(s), first at index {first_index}")
            }
            Violation::LayerIndex { layer, reason } => write!(f, "layer index {layer}: {reason}"),
            Violation::UnknownComponent(name) => write!(f, "unknown component `{name}`"),
            Violation::EmptyShape { tokens, dim } => {
                write!(f, "shape: tokens ({tokens}) and dim ({dim}) must be positive")
            }
            Violation::ObservationCount { expected, actual } => {
                write!(f, "observation count: expected {expected}, summary holds {actual}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationVerdict {
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        let msgs: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&msgs.join("; "))
    }
}

/// Checks every record invariant and reports all violations found.
pub fn validate_record(rec: &ActivationRecord) -> ValidationVerdict {
    let mut violations = Vec::new();

    match &rec.component {
        ComponentField::Unknown(name) => violations.push(Violation::UnknownComponent(name.clone())),
        ComponentField::Known(c) if c.is_model_level() && rec.layer != 0 => {
            violations.push(Violation::LayerIndex {
                layer: rec.layer,
                reason: "embedding and final-norm records must use layer 0",
            })
        }
        ComponentField::Known(_) => {}
    }
    if rec.layer < 0 {
        violations.push(Violation::LayerIndex {
            layer: rec.layer,
            reason: "must be non-negative",
        });
    } else if rec.layer > i64::from(u32::MAX) {
        violations.push(Violation::LayerIndex {
            layer: rec.layer,
            reason: "exceeds 32-bit range",
        });
    }
    if rec.tokens == 0 || rec.dim == 0 {
        violations.push(Violation::EmptyShape {
            tokens: rec.tokens,
            dim: rec.dim,
        });
    }

    let expected = rec.tokens.saturating_mul(rec.dim);
    match &rec.payload {
        Payload::Raw(values) => {
            if values.len() as u64 != expected {
                violations.push(Violation::PayloadLength {
                    expected,
                    actual: values.len() as u64,
                });
            }
            let mut bad = values.iter().enumerate().filter(|(_, v)| !v.is_finite());
            if let Some((first_index, _)) = bad.next() {
                violations.push(Violation::NonFinite {
                    first_index,
                    count: 1 + bad.count(),
                });
            }
        }
        Payload::Summary(acc) => {
            if acc.count() != expected {
                violations.push(Violation::ObservationCount {
                    expected,
                    actual: acc.count(),
                });
            }
        }
    }

    ValidationVerdict { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(layer: i64, component: ComponentField, tokens: u64, dim: u64, values: Vec<f64>) -> ActivationRecord {
        ActivationRecord {
            model_id: "m".into(),
            sample_id: "s".into(),
            layer,
            component,
            tokens,
            dim,
            payload: Payload::Raw(values),
        }
    }

    #[test]
    fn well_formed_raw_chunk_is_ok() {
        let rec = raw(0, ComponentClass::HiddenState.into(), 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(validate_record(&rec).is_ok());
    }

    #[test]
    fn short_payload_is_reported() {
        let rec = raw(0, ComponentClass::HiddenState.into(), 2, 3, vec![1.0; 5]);
        let verdict = validate_record(&rec);
        assert_eq!(
            verdict.violations,
            vec![Violation::PayloadLength { expected: 6, actual: 5 }]
        );
        assert!(verdict.to_string().contains("payload length"));
    }

    #[test]
    fn negative_layer_is_reported() {
        let rec = raw(-1, ComponentClass::HiddenState.into(), 1, 1, vec![0.0]);
        let verdict = validate_record(&rec);
        assert!(verdict.to_string().contains("layer index"));
        assert!(rec.location().is_none());
    }

    #[test]
    fn reports_every_violation_at_once() {
        let rec = raw(3, ComponentField::Unknown("ffn".into()), 1, 2, vec![f64::NAN, f64::INFINITY, 1.0]);
        let verdict = validate_record(&rec);
        assert_eq!(verdict.violations.len(), 3, "{verdict}");
        assert!(verdict
            .violations
            .contains(&Violation::NonFinite { first_index: 0, count: 2 }));
    }

    #[test]
    fn model_level_components_require_layer_zero() {
        let rec = raw(2, ComponentClass::FinalNorm.into(), 1, 1, vec![0.5]);
        assert!(validate_record(&rec).to_string().contains("layer index"));
        assert!(TapLocation::new(2, ComponentClass::Embedding).is_err());
        assert!(TapLocation::new(0, ComponentClass::Embedding).is_ok());
    }

    #[test]
    fn unknown_component_survives_decoding() {
        let json = r#"{"model_id":"m","sample_id":"s","layer":0,"component":"ffn_out","tokens":1,"dim":1,"payload":{"raw":[1.0]}}"#;
        let rec: ActivationRecord = serde_json::from_str(json).unwrap();
        assert_eq!(rec.component, ComponentField::Unknown("ffn_out".into()));
        assert_eq!(serde_json::to_string(&rec).unwrap(), json);
    }

    #[test]
    fn token_views_split_row_major() {
        let rec = ActivationRecord::raw("m", "s", TapLocation::hidden(1), 2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let toks: Vec<_> = rec.raw_tokens().map(|t| (t.token_index, t.values.to_vec())).collect();
        assert_eq!(toks, vec![(0, vec![1., 2., 3.]), (1, vec![4., 5., 6.])]);
    }
}

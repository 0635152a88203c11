//! Activation dynamic-range measurement for transformer forward passes.
//!
//! The crate captures activation tensors at six tap classes, folds them into
//! mergeable per-cell statistics, evaluates the massive-activation criterion,
//! probes per-tensor INT-8 quantization error, and assembles model cards.

pub mod analysis;
pub mod corpus;
pub mod criterion;
pub mod error;
pub mod exact;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod record;
mod serde_ext;
pub mod sketch;
pub mod stats;
pub mod topk;
pub mod wire;

pub use error::{Error, Result};
pub use record::{ActivationRecord, ComponentClass, Payload, TapLocation, TokenVector, TokenView};
pub use stats::{CellAccumulator, StatSummary, TokenEvidence};

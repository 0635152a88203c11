//! Record stream files.
//!
//! A stream starts with a header line
//! `{"actscope_records":1,"encoding":"json"}` (or `"binary-f32"`) and holds
//! one record per line after it. In `json` encoding raw payloads are plain
//! number arrays written in shortest round-trip form, so decoding is
//! bit-exact. In `binary-f32` encoding a raw payload is written as
//! `{"binary_f32":n}` and the JSON line is followed by a little-endian `u32`
//! count and `n` little-endian `f32` values. Values are narrowed to `f32`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ActivationRecord, ComponentField, Payload};
use crate::stats::CellAccumulator;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Encoding {
    #[serde(rename = "json")]
    Json,
    #[serde(rename = "binary-f32")]
    BinaryF32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    actscope_records: u32,
    encoding: Encoding,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WirePayload<'a> {
    Raw(std::borrow::Cow<'a, [f64]>),
    Summary(std::borrow::Cow<'a, CellAccumulator>),
    BinaryF32(u64),
}

#[derive(Serialize, Deserialize)]
struct WireRecord<'a> {
    #[serde(borrow)]
    model_id: std::borrow::Cow<'a, str>,
    #[serde(borrow)]
    sample_id: std::borrow::Cow<'a, str>,
    layer: i64,
    component: ComponentField,
    tokens: u64,
    dim: u64,
    payload: WirePayload<'a>,
}

pub struct RecordWriter<W: Write> {
    inner: W,
    encoding: Encoding,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut inner: W, encoding: Encoding) -> Result<Self> {
        serde_json::to_writer(
            &mut inner,
            &Header {
                actscope_records: FORMAT_VERSION,
                encoding,
            },
        )?;
        inner.write_all(b"\n").map_err(stream_io)?;
        Ok(RecordWriter { inner, encoding })
    }

    pub fn write(&mut self, rec: &ActivationRecord) -> Result<()> {
        let binary = matches!((&rec.payload, self.encoding), (Payload::Raw(_), Encoding::BinaryF32));
        let payload = match &rec.payload {
            Payload::Raw(v) if binary => WirePayload::BinaryF32(v.len() as u64),
            Payload::Raw(v) => WirePayload::Raw(v.as_slice().into()),
            Payload::Summary(acc) => WirePayload::Summary(std::borrow::Cow::Borrowed(acc)),
        };
        let wire = WireRecord {
            model_id: rec.model_id.as_str().into(),
            sample_id: rec.sample_id.as_str().into(),
            layer: rec.layer,
            component: rec.component.clone(),
            tokens: rec.tokens,
            dim: rec.dim,
            payload,
        };
        serde_json::to_writer(&mut self.inner, &wire)?;
        self.inner.write_all(b"\n").map_err(stream_io)?;
        if let (true, Payload::Raw(values)) = (binary, &rec.payload) {
            let n = u32::try_from(values.len())
                .map_err(|_| Error::InvalidInput(format!("raw payload of {} values too long", values.len())))?;
            let mut buf = Vec::with_capacity(4 + 4 * values.len());
            buf.extend_from_slice(&n.to_le_bytes());
            for &v in values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            self.inner.write_all(&buf).map_err(stream_io)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(stream_io)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

fn stream_io(e: std::io::Error) -> Error {
    Error::io("<record stream>", e)
}

/// Iterates the records of a stream. Errors carry the 1-based line number
/// (the header is line 1).
pub struct RecordReader<R: BufRead> {
    inner: R,
    encoding: Encoding,
    line: usize,
    buf: String,
    done: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = String::new();
        let n = inner.read_line(&mut buf).map_err(stream_io)?;
        if n == 0 {
            return Err(Error::NoRecords);
        }
        let header: Header = serde_json::from_str(buf.trim_end()).map_err(|e| Error::Malformed {
            line: 1,
            reason: format!("bad header: {e}"),
        })?;
        if header.actscope_records != FORMAT_VERSION {
            return Err(Error::Malformed {
                line: 1,
                reason: format!("unsupported format version {}", header.actscope_records),
            });
        }
        Ok(RecordReader {
            inner,
            encoding: header.encoding,
            line: 1,
            buf,
            done: false,
        })
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            line: self.line,
            reason: reason.into(),
        }
    }

    fn next_record(&mut self) -> Result<Option<ActivationRecord>> {
        loop {
            self.buf.clear();
            let n = self.inner.read_line(&mut self.buf).map_err(|e| self.malformed(e.to_string()))?;
            if n == 0 {
                return Ok(None);
            }
            self.line += 1;
            if !self.buf.trim().is_empty() {
                break;
            }
        }
        let line = std::mem::take(&mut self.buf);
        let wire: WireRecord<'_> = serde_json::from_str(line.trim_end()).map_err(|e| self.malformed(e.to_string()))?;
        let payload = match wire.payload {
            WirePayload::Raw(v) => Payload::Raw(v.into_owned()),
            WirePayload::Summary(acc) => {
                let acc = acc.into_owned();
                acc.check_invariants().map_err(|e| self.malformed(e.to_string()))?;
                Payload::Summary(Box::new(acc))
            }
            WirePayload::BinaryF32(n) => {
                if self.encoding != Encoding::BinaryF32 {
                    return Err(self.malformed("binary payload in a json-encoded stream"));
                }
                let mut len = [0u8; 4];
                self.inner
                    .read_exact(&mut len)
                    .map_err(|e| self.malformed(format!("binary payload: {e}")))?;
                let len = u32::from_le_bytes(len) as u64;
                if len != n {
                    return Err(self.malformed(format!("binary payload declares {n} values, prefix says {len}")));
                }
                let mut bytes = vec![0u8; 4 * len as usize];
                self.inner
                    .read_exact(&mut bytes)
                    .map_err(|e| self.malformed(format!("binary payload: {e}")))?;
                Payload::Raw(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                        .collect(),
                )
            }
        };
        let rec = ActivationRecord {
            model_id: wire.model_id.into_owned(),
            sample_id: wire.sample_id.into_owned(),
            layer: wire.layer,
            component: wire.component,
            tokens: wire.tokens,
            dim: wire.dim,
            payload,
        };
        self.buf = line;
        Ok(Some(rec))
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(rec)) => Some(Ok(rec)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

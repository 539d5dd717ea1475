//! The `VTCT` attention-trace container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VTCT" | version: u32 = 1 | header_len: u64 | header: UTF-8 JSON | payload: f32 LE
//! ```
//!
//! Encoder payloads are ordered layer, head, visual position. Decoder
//! payloads are ordered layer, head, output token, visual position. Only the
//! CLS row (encoder) or output-token rows (decoder) are stored, sliced to the
//! visual positions and left un-renormalised.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTCT";
pub const VERSION: u32 = 1;

const ENCODER_ORDER: &str = "layer,head,visual";
const DECODER_ORDER: &str = "layer,head,output,visual";
const MAX_HEADER_LEN: u64 = 1 << 20;

/// Tolerance applied to stored attention values.
pub const VALUE_TOLERANCE: f32 = 1e-6;
/// Tolerance on the sum of a stored visual slice.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceRole {
    Encoder,
    Decoder,
}

impl TraceRole {
    pub fn name(self) -> &'static str {
        match self {
            TraceRole::Encoder => "encoder",
            TraceRole::Decoder => "decoder",
        }
    }

    fn array_order(self) -> &'static str {
        match self {
            TraceRole::Encoder => ENCODER_ORDER,
            TraceRole::Decoder => DECODER_ORDER,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    role: TraceRole,
    num_layers: usize,
    num_heads: usize,
    num_visual_tokens: usize,
    num_output_tokens: usize,
    dtype: String,
    array_order: String,
}

/// Post-softmax attention rows restricted to visual-token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    role: TraceRole,
    num_layers: usize,
    num_heads: usize,
    num_visual_tokens: usize,
    num_output_tokens: usize,
    data: Vec<f32>,
}

impl AttentionTrace {
    /// Builds an encoder trace from CLS rows laid out layer, head, visual.
    pub fn encoder(
        num_layers: usize,
        num_heads: usize,
        num_visual_tokens: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let trace = Self {
            role: TraceRole::Encoder,
            num_layers,
            num_heads,
            num_visual_tokens,
            num_output_tokens: 0,
            data,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Builds a decoder trace from output-token rows laid out layer, head,
    /// output token, visual.
    pub fn decoder(
        num_layers: usize,
        num_heads: usize,
        num_output_tokens: usize,
        num_visual_tokens: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let trace = Self {
            role: TraceRole::Decoder,
            num_layers,
            num_heads,
            num_visual_tokens,
            num_output_tokens,
            data,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn role(&self) -> TraceRole {
        self.role
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.num_visual_tokens
    }

    pub fn num_output_tokens(&self) -> usize {
        self.num_output_tokens
    }

    /// Raw payload in declared order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn rows_per_head(&self) -> usize {
        match self.role {
            TraceRole::Encoder => 1,
            TraceRole::Decoder => self.num_output_tokens,
        }
    }

    fn expected_len(&self) -> Option<usize> {
        self.num_layers
            .checked_mul(self.num_heads)?
            .checked_mul(self.rows_per_head())?
            .checked_mul(self.num_visual_tokens)
    }

    /// CLS row for `(layer, head)`. Panics on out-of-range indices or a
    /// decoder trace.
    pub fn cls_row(&self, layer: usize, head: usize) -> &[f32] {
        assert_eq!(self.role, TraceRole::Encoder, "cls_row on decoder trace");
        assert!(layer < self.num_layers && head < self.num_heads);
        let start = (layer * self.num_heads + head) * self.num_visual_tokens;
        &self.data[start..start + self.num_visual_tokens]
    }

    /// Output-token row for `(layer, head, token)`. Panics on out-of-range
    /// indices or an encoder trace.
    pub fn output_row(&self, layer: usize, head: usize, token: usize) -> &[f32] {
        assert_eq!(self.role, TraceRole::Decoder, "output_row on encoder trace");
        assert!(
            layer < self.num_layers && head < self.num_heads && token < self.num_output_tokens
        );
        let row = (layer * self.num_heads + head) * self.num_output_tokens + token;
        let start = row * self.num_visual_tokens;
        &self.data[start..start + self.num_visual_tokens]
    }

    /// Contiguous payload of one layer.
    pub fn layer_rows(&self, layer: usize) -> impl Iterator<Item = &[f32]> {
        let per_layer = self.num_heads * self.rows_per_head();
        let width = self.num_visual_tokens;
        let start = layer * per_layer * width;
        self.data[start..start + per_layer * width].chunks_exact(width)
    }

    pub fn require_role(&self, role: TraceRole) -> Result<()> {
        if self.role == role {
            Ok(())
        } else {
            Err(Error::Role {
                expected: role.name(),
                found: self.role.name(),
            })
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.num_visual_tokens == 0 {
            return Err(Error::InvalidTrace(
                "layer, head and visual-token counts must be positive".into(),
            ));
        }
        if self.role == TraceRole::Encoder && self.num_output_tokens != 0 {
            return Err(Error::InvalidTrace(
                "encoder traces carry no output tokens".into(),
            ));
        }
        let expected = self
            .expected_len()
            .ok_or_else(|| Error::InvalidTrace("dimensions overflow".into()))?;
        if self.data.len() != expected {
            return Err(Error::CorruptPayload(format!(
                "expected {expected} values, found {}",
                self.data.len()
            )));
        }
        for (index, &value) in self.data.iter().enumerate() {
            if !(-VALUE_TOLERANCE..=1.0 + VALUE_TOLERANCE).contains(&value) {
                return Err(Error::Range { index, value });
            }
        }
        for (row, chunk) in self.data.chunks_exact(self.num_visual_tokens).enumerate() {
            let sum: f64 = chunk.iter().map(|&v| v as f64).sum();
            if sum > 1.0 + ROW_SUM_TOLERANCE {
                return Err(Error::InvalidTrace(format!(
                    "row {row} sums to {sum}, above 1"
                )));
            }
        }
        Ok(())
    }

    fn header(&self) -> Header {
        Header {
            role: self.role,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            num_visual_tokens: self.num_visual_tokens,
            num_output_tokens: self.num_output_tokens,
            dtype: "f32".into(),
            array_order: self.role.array_order().into(),
        }
    }
}

/// Serialises `trace` to `sink`, returning the number of bytes written.
pub fn write_trace<W: Write>(trace: &AttentionTrace, mut sink: W) -> Result<u64> {
    let header = serde_json::to_vec(&trace.header())
        .map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    sink.write_all(MAGIC)?;
    sink.write_all(&VERSION.to_le_bytes())?;
    sink.write_all(&(header.len() as u64).to_le_bytes())?;
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(trace.data.len() * 4);
    for v in &trace.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok((4 + 4 + 8 + header.len() + payload.len()) as u64)
}

pub fn to_bytes(trace: &AttentionTrace) -> Vec<u8> {
    let mut out = Vec::new();
    write_trace(trace, &mut out).expect("writing to a Vec cannot fail");
    out
}

fn read_prefix<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("file ends inside {what}")),
        _ => Error::Io(e),
    })
}

/// Parses and validates a trace. Reads exactly the declared payload and then
/// checks that the source is exhausted.
pub fn read_trace<R: Read>(mut source: R) -> Result<AttentionTrace> {
    let mut magic = [0u8; 4];
    read_prefix(&mut source, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }

    let mut word = [0u8; 4];
    read_prefix(&mut source, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }

    let mut len = [0u8; 8];
    read_prefix(&mut source, &mut len, "header length")?;
    let header_len = u64::from_le_bytes(len);
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!("header length {header_len} too large")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_prefix(&mut source, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.array_order != header.role.array_order() {
        return Err(Error::Format(format!(
            "unexpected array order {:?}",
            header.array_order
        )));
    }

    let mut trace = AttentionTrace {
        role: header.role,
        num_layers: header.num_layers,
        num_heads: header.num_heads,
        num_visual_tokens: header.num_visual_tokens,
        num_output_tokens: header.num_output_tokens,
        data: Vec::new(),
    };
    let count = trace
        .expected_len()
        .ok_or_else(|| Error::CorruptPayload("dimensions overflow".into()))?;
    let byte_len = count
        .checked_mul(4)
        .ok_or_else(|| Error::CorruptPayload("dimensions overflow".into()))?;

    let mut payload = Vec::new();
    let read = (&mut source).take(byte_len as u64).read_to_end(&mut payload)?;
    if read != byte_len {
        return Err(Error::CorruptPayload(format!(
            "expected {byte_len} payload bytes, found {read}"
        )));
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }

    trace.data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    trace.validate()?;
    Ok(trace)
}

pub fn write_trace_file(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<u64> {
    let file = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(file))
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

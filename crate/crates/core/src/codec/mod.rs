//! Prediction-based error-bounded codec: 3D Lorenzo prediction on
//! reconstructed values, linear quantization with an unpredictable queue,
//! and canonical Huffman coding of the quantization codes.
//!
//! The first point of every block is always routed to the unpredictable
//! queue and left out of the code stream. On blocks where every other point
//! lands on the same code this leaves a single-symbol alphabet, which the
//! Huffman stage stores in zero bits.

pub mod external;
pub mod huffman;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Dims, Precision, ScalarField};
use huffman::{huffman_decode, huffman_encode, HuffmanTable};

pub use external::{external_compress, ExternalTool};

/// Quantization radius used unless configured otherwise (16-bit codes).
pub const DEFAULT_RADIUS: u32 = 1 << 15;

const PAYLOAD_MAGIC: &[u8; 4] = b"LQH1";
const HEADER_LEN: usize = 4 + 24 + 8 + 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("invalid error bound: {0}")]
    InvalidBound(String),
    #[error("external tool not found: {0}")]
    ToolMissing(String),
    #[error("external tool `{program}` failed ({status}): {stderr}")]
    ToolFailed { program: String, status: String, stderr: String },
    #[error("external tool violated the bound at index {index}: |err| = {error} > {abs}")]
    BoundViolated { index: usize, error: f64, abs: f64 },
    #[error("external tool template: {0}")]
    BadTemplate(String),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pointwise error bound of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    /// Value-range-relative bound.
    pub rel: f64,
    /// Absolute bound every reconstructed point must respect.
    pub abs: f64,
    pub vrange: f64,
}

/// Converts a relative bound into an absolute one using the field's value
/// range. A constant field uses `abs = rel` so the bound stays positive.
pub fn abs_bound(rel: f64, field: &ScalarField) -> Result<ErrorBound, CodecError> {
    if !(rel > 0.0 && rel.is_finite()) {
        return Err(CodecError::InvalidBound(format!("relative bound must be > 0, got {rel}")));
    }
    if field.is_empty() {
        return Err(CodecError::InvalidBound("empty field".into()));
    }
    let vrange = field.value_range();
    let abs = if vrange > 0.0 { rel * vrange } else { rel };
    Ok(ErrorBound { rel, abs, vrange })
}

/// First-order 3D Lorenzo prediction from reconstructed neighbours.
/// Neighbours outside the block contribute zero.
#[inline]
pub fn lorenzo_predict(recon: &[f64], dims: Dims, i: usize, j: usize, k: usize) -> f64 {
    let at = |di: usize, dj: usize, dk: usize| -> f64 {
        if i >= di && j >= dj && k >= dk {
            recon[dims.index(i - di, j - dj, k - dk)]
        } else {
            0.0
        }
    };
    at(1, 0, 0) + at(0, 1, 0) + at(0, 0, 1) - at(1, 1, 0) - at(1, 0, 1) - at(0, 1, 1)
        + at(1, 1, 1)
}

/// Outcome of quantizing one prediction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantized {
    /// Symbol in `1..=2·radius+1`; `radius + 1` is the zero-error center.
    Code(u32),
    Unpredictable,
}

#[inline]
pub fn center(radius: u32) -> u32 {
    radius + 1
}

/// Linear quantization of `actual - pred` into bins of width `2·abs`.
#[inline]
pub fn quantize(pred: f64, actual: f64, abs: f64, radius: u32) -> Quantized {
    let q = ((actual - pred) / (2.0 * abs)).round();
    if q.is_finite() && q.abs() <= radius as f64 {
        Quantized::Code((q as i64 + center(radius) as i64) as u32)
    } else {
        Quantized::Unpredictable
    }
}

#[inline]
pub fn dequantize(pred: f64, code: u32, abs: f64, radius: u32) -> f64 {
    pred + (code as i64 - center(radius) as i64) as f64 * (2.0 * abs)
}

/// Quantization codes (0 marks an unpredictable point) and the raw values
/// of the unpredictable points in scan order.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub codes: Vec<u32>,
    pub unpredictables: Vec<f64>,
    pub radius: u32,
}

/// Runs prediction and quantization, returning the codes and the exact
/// reconstruction the decoder will produce.
pub fn quantize_block(field: &ScalarField, abs: f64, radius: u32) -> (QuantizedBlock, Vec<f64>) {
    let dims = field.dims;
    let prec = field.precision;
    let vals = field.values();
    let mut recon = vec![0.0; vals.len()];
    let mut codes = Vec::with_capacity(vals.len());
    let mut unpredictables = Vec::new();
    let [d0, d1, d2] = dims.0;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let idx = dims.index(i, j, k);
                let actual = vals[idx];
                let pred = lorenzo_predict(&recon, dims, i, j, k);
                let coded = match (idx, quantize(pred, actual, abs, radius)) {
                    (0, _) | (_, Quantized::Unpredictable) => None,
                    (_, Quantized::Code(c)) => {
                        let r = prec.round(dequantize(pred, c, abs, radius));
                        ((r - actual).abs() <= abs).then_some((c, r))
                    }
                };
                match coded {
                    Some((c, r)) => {
                        codes.push(c);
                        recon[idx] = r;
                    }
                    None => {
                        codes.push(0);
                        unpredictables.push(actual);
                        recon[idx] = actual;
                    }
                }
            }
        }
    }
    (QuantizedBlock { codes, unpredictables, radius }, recon)
}

/// Serialized codec output for one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedPayload {
    pub bytes: Vec<u8>,
}

/// Fixed fields at the front of a payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PayloadHeader {
    pub dims: Dims,
    pub abs: f64,
    pub radius: u32,
    pub precision: Precision,
    pub unpredictable_count: u64,
}

impl CompressedPayload {
    pub fn len_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8
    }

    pub fn header(&self) -> Result<PayloadHeader, CodecError> {
        parse_header(&self.bytes)
    }
}

fn parse_header(b: &[u8]) -> Result<PayloadHeader, CodecError> {
    let corrupt = |m: &str| CodecError::CorruptPayload(m.to_string());
    if b.len() < HEADER_LEN || &b[..4] != PAYLOAD_MAGIC {
        return Err(corrupt("bad payload header"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let dims = Dims::new(u64_at(4) as usize, u64_at(12) as usize, u64_at(20) as usize);
    let abs = f64::from_le_bytes(b[28..36].try_into().unwrap());
    let radius = u32::from_le_bytes(b[36..40].try_into().unwrap());
    let precision = Precision::from_tag(b[40]).ok_or_else(|| corrupt("bad precision tag"))?;
    let unpredictable_count = u64_at(44);
    if dims.is_empty() || !(abs > 0.0) {
        return Err(corrupt("bad dims or bound"));
    }
    Ok(PayloadHeader { dims, abs, radius, precision, unpredictable_count })
}

/// Compresses one block. The returned field is bit-identical to what
/// [`decompress_block`] produces from the payload.
pub fn compress_block(
    field: &ScalarField,
    bound: &ErrorBound,
    radius: u32,
) -> Result<(CompressedPayload, ScalarField), CodecError> {
    if !(bound.abs > 0.0 && bound.abs.is_finite()) {
        return Err(CodecError::InvalidBound(format!("absolute bound {}", bound.abs)));
    }
    let (block, recon) = quantize_block(field, bound.abs, radius);
    let (stream, table, _bits) = huffman_encode(&block.codes[1..]);

    let prec = field.precision;
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() + block.unpredictables.len() * 8);
    out.extend_from_slice(PAYLOAD_MAGIC);
    for d in field.dims.0 {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&bound.abs.to_le_bytes());
    out.extend_from_slice(&radius.to_le_bytes());
    out.extend_from_slice(&[prec.tag(), 0, 0, 0]);
    out.extend_from_slice(&(block.unpredictables.len() as u64).to_le_bytes());
    out.extend_from_slice(&table.to_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    out.extend_from_slice(&stream);
    for &v in &block.unpredictables {
        prec.write_le(v, &mut out);
    }
    let decompressed = ScalarField::new(field.name.clone(), field.dims, prec, recon)?;
    Ok((CompressedPayload { bytes: out }, decompressed))
}

pub fn decompress_block(payload: &CompressedPayload, name: &str) -> Result<ScalarField, CodecError> {
    let b = &payload.bytes;
    let h = parse_header(b)?;
    let corrupt = |m: &str| CodecError::CorruptPayload(m.to_string());
    let (table, used) = HuffmanTable::from_bytes(&b[HEADER_LEN..])?;
    let mut pos = HEADER_LEN + used;
    let stream_len = b
        .get(pos..pos + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()) as usize)
        .ok_or_else(|| corrupt("missing stream length"))?;
    pos += 8;
    let stream = b.get(pos..pos + stream_len).ok_or_else(|| corrupt("code stream truncated"))?;
    pos += stream_len;
    let n = h.dims.len();
    let mut codes = vec![0u32];
    codes.extend(huffman_decode(stream, &table, n - 1)?);

    let width = h.precision.bytes();
    let n_unpred = h.unpredictable_count as usize;
    if codes.iter().filter(|&&c| c == 0).count() != n_unpred {
        return Err(corrupt("unpredictable count mismatch"));
    }
    let blob = b
        .get(pos..pos + n_unpred * width)
        .ok_or_else(|| corrupt("unpredictable queue truncated"))?;
    if pos + n_unpred * width != b.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    let mut unpred = blob.chunks_exact(width).map(|c| h.precision.read_le(c));

    let dims = h.dims;
    let mut recon = vec![0.0; n];
    let [d0, d1, d2] = dims.0;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let idx = dims.index(i, j, k);
                recon[idx] = match codes[idx] {
                    0 => unpred.next().expect("count checked above"),
                    c => {
                        let pred = lorenzo_predict(&recon, dims, i, j, k);
                        h.precision.round(dequantize(pred, c, h.abs, h.radius))
                    }
                };
            }
        }
    }
    Ok(ScalarField::new(name, dims, h.precision, recon)?)
}

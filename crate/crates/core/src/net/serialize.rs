//! Binary weight blob.
//!
//! ```text
//! magic        4  b"NLZW"
//! version      u16
//! precision    u8   1 = f32, 2 = f64
//! flags        u8   bit0 skip, bit1 sigmoid, bit2 direct targets
//! in_channels  u16
//! base_width   u16
//! levels       u16
//! kernel       u16
//! param_count  u32
//! params       param_count × precision, little-endian
//! ```
//!
//! The seed is not stored; a deserialized config carries seed 0.

use super::{param_count, NetConfig, NetError, TargetMode, Weights};
use crate::field::Precision;

pub const WEIGHT_MAGIC: &[u8; 4] = b"NLZW";
pub const WEIGHT_VERSION: u16 = 1;
pub const WEIGHT_HEADER_LEN: usize = 20;

const FLAG_SKIP: u8 = 1;
const FLAG_SIGMOID: u8 = 2;
const FLAG_DIRECT: u8 = 4;

fn narrow(v: usize, what: &str) -> Result<u16, NetError> {
    u16::try_from(v).map_err(|_| NetError::Config(format!("{what} {v} does not fit the weight header")))
}

pub fn serialize_weights(weights: &Weights, precision: Precision) -> Result<Vec<u8>, NetError> {
    let cfg = &weights.config;
    let mut out = Vec::with_capacity(WEIGHT_HEADER_LEN + weights.len() * precision.bytes());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    out.push(precision.tag());
    let mut flags = 0;
    if cfg.skip_connections {
        flags |= FLAG_SKIP;
    }
    if cfg.final_sigmoid {
        flags |= FLAG_SIGMOID;
    }
    if cfg.target_mode == TargetMode::Direct {
        flags |= FLAG_DIRECT;
    }
    out.push(flags);
    for (v, what) in [
        (cfg.in_channels, "in_channels"),
        (cfg.base_width, "base_width"),
        (cfg.levels, "levels"),
        (cfg.kernel, "kernel"),
    ] {
        out.extend_from_slice(&narrow(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for &p in &weights.params {
        precision.write_le(p, &mut out);
    }
    Ok(out)
}

pub fn deserialize_weights(bytes: &[u8]) -> Result<Weights, NetError> {
    let corrupt = |m: String| NetError::CorruptWeights(m);
    if bytes.len() < WEIGHT_HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != WEIGHT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != WEIGHT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let precision =
        Precision::from_tag(bytes[6]).ok_or_else(|| corrupt(format!("unknown precision tag {}", bytes[6])))?;
    let flags = bytes[7];
    if flags & !(FLAG_SKIP | FLAG_SIGMOID | FLAG_DIRECT) != 0 {
        return Err(corrupt(format!("unknown flag bits {flags:#04x}")));
    }
    let config = NetConfig {
        in_channels: u16_at(8) as usize,
        base_width: u16_at(10) as usize,
        levels: u16_at(12) as usize,
        kernel: u16_at(14) as usize,
        skip_connections: flags & FLAG_SKIP != 0,
        final_sigmoid: flags & FLAG_SIGMOID != 0,
        target_mode: if flags & FLAG_DIRECT != 0 { TargetMode::Direct } else { TargetMode::Residual },
        seed: 0,
    };
    let count = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expected = param_count(&config).map_err(|e| corrupt(e.to_string()))?;
    if count != expected {
        return Err(corrupt(format!("header declares {count} parameters, architecture has {expected}")));
    }
    let body = &bytes[WEIGHT_HEADER_LEN..];
    let width = precision.bytes();
    if body.len() != count * width {
        return Err(corrupt(format!("expected {} parameter bytes, found {}", count * width, body.len())));
    }
    let params: Vec<f64> = body.chunks_exact(width).map(|c| precision.read_le(c)).collect();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(corrupt(format!("parameter {i} is not finite")));
    }
    Weights::from_params(config, params)
}

/// Weights as they will be after a store/load cycle at `precision`.
pub fn round_to_storage(weights: &Weights, precision: Precision) -> Weights {
    let params = weights.params.iter().map(|&p| precision.round(p)).collect();
    let mut config = weights.config.clone();
    config.seed = 0;
    Weights::from_params(config, params).expect("same layout")
}

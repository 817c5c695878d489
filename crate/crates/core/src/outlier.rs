//! Outlier detection, coordinate packing and the two bound modes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitio::{BitReader, BitWriter};
use crate::field::Dims;

#[derive(Debug, Error, PartialEq)]
pub enum OutlierError {
    #[error("shape mismatch: {0} vs {1} values")]
    ShapeMismatch(usize, usize),
    #[error("outlier index {index} out of range for {len} points")]
    IndexOutOfRange { index: u64, len: usize },
    #[error("corrupt outlier blob: {0}")]
    CorruptBlob(String),
}

/// How the final reconstruction is held to the error bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// Outlier coordinates are stored and replaced, giving a 1× bound.
    Strict,
    /// No coordinates; the sigmoid-regulated residual keeps errors below 2×.
    Regulated,
}

impl BoundMode {
    pub fn tag(self) -> u8 {
        match self {
            BoundMode::Strict => 1,
            BoundMode::Regulated => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(BoundMode::Strict),
            2 => Some(BoundMode::Regulated),
            _ => None,
        }
    }
}

impl std::str::FromStr for BoundMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(BoundMode::Strict),
            "regulated" => Ok(BoundMode::Regulated),
            other => Err(format!("unknown bound mode `{other}` (expected strict or regulated)")),
        }
    }
}

/// Sorted, strictly increasing linear indices of out-of-bound points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutlierSet {
    indices: Vec<u64>,
    dims: Dims,
}

impl OutlierSet {
    pub fn new(mut indices: Vec<u64>, dims: Dims) -> Result<Self, OutlierError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= dims.len() as u64 {
                return Err(OutlierError::IndexOutOfRange { index: last, len: dims.len() });
            }
        }
        Ok(OutlierSet { indices, dims })
    }

    pub fn empty(dims: Dims) -> Self {
        OutlierSet { indices: Vec::new(), dims }
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Points where `|original − enhanced| > abs`. Equality is in bound.
pub fn find_outliers(original: &[f64], enhanced: &[f64], dims: Dims, abs: f64) -> Result<OutlierSet, OutlierError> {
    find_outliers_scaled(original, enhanced, dims, abs, 1.0)
}

/// As [`find_outliers`] with the threshold `abs·multiplier` (2 reproduces
/// the looser accounting some experiments use).
pub fn find_outliers_scaled(
    original: &[f64],
    enhanced: &[f64],
    dims: Dims,
    abs: f64,
    multiplier: f64,
) -> Result<OutlierSet, OutlierError> {
    if original.len() != enhanced.len() {
        return Err(OutlierError::ShapeMismatch(original.len(), enhanced.len()));
    }
    if original.len() != dims.len() {
        return Err(OutlierError::ShapeMismatch(original.len(), dims.len()));
    }
    let threshold = abs * multiplier;
    let indices = original
        .iter()
        .zip(enhanced)
        .enumerate()
        .filter(|(_, (o, e))| (*o - *e).abs() > threshold)
        .map(|(i, _)| i as u64)
        .collect();
    Ok(OutlierSet { indices, dims })
}

/// Replaces outliers in `enhanced` by their decompressed values.
pub fn apply_replacement(enhanced: &[f64], decompressed: &[f64], outliers: &OutlierSet) -> Result<Vec<f64>, OutlierError> {
    if enhanced.len() != decompressed.len() {
        return Err(OutlierError::ShapeMismatch(enhanced.len(), decompressed.len()));
    }
    let mut out = enhanced.to_vec();
    for &i in &outliers.indices {
        let slot = out
            .get_mut(i as usize)
            .ok_or(OutlierError::IndexOutOfRange { index: i, len: enhanced.len() })?;
        *slot = decompressed[i as usize];
    }
    Ok(out)
}

/// Average bits needed to address one point: `Σ log2(dim_i)`.
pub fn avg_bit(dims: Dims) -> f64 {
    dims.0.iter().map(|&d| (d as f64).log2()).sum()
}

/// Bits per packed index: `ceil(log2(total points))`, at least 1.
pub fn index_width(dims: Dims) -> u32 {
    let n = dims.len() as u64;
    if n <= 2 {
        1
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Bytes before the packed indices: u32 count and u8 width.
pub const BLOB_HEADER_BYTES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordsOverhead {
    /// `n · avg_bit(dims)`.
    pub theoretical: f64,
    /// `n · index_width(dims)`, without the blob header.
    pub packed_payload: u64,
    /// Physical blob size in bits, header and byte padding included.
    pub packed: u64,
}

pub fn coords_overhead_bits(n: usize, dims: Dims) -> CoordsOverhead {
    let payload = n as u64 * index_width(dims) as u64;
    CoordsOverhead {
        theoretical: n as f64 * avg_bit(dims),
        packed_payload: payload,
        packed: (BLOB_HEADER_BYTES as u64 + payload.div_ceil(8)) * 8,
    }
}

pub fn pack_coords(outliers: &OutlierSet) -> Vec<u8> {
    let width = index_width(outliers.dims);
    let mut out = Vec::with_capacity(BLOB_HEADER_BYTES + (outliers.len() * width as usize).div_ceil(8));
    out.extend_from_slice(&(outliers.len() as u32).to_le_bytes());
    out.push(width as u8);
    let mut w = BitWriter::new();
    for &i in &outliers.indices {
        w.write(i, width);
    }
    out.extend(w.finish());
    out
}

pub fn unpack_coords(bytes: &[u8], dims: Dims) -> Result<OutlierSet, OutlierError> {
    let corrupt = |m: String| OutlierError::CorruptBlob(m);
    if bytes.len() < BLOB_HEADER_BYTES {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let width = bytes[4] as u32;
    let expected_width = index_width(dims);
    if width != expected_width {
        return Err(corrupt(format!("index width {width}, dims imply {expected_width}")));
    }
    let body = &bytes[BLOB_HEADER_BYTES..];
    if body.len() != (count * width as usize).div_ceil(8) {
        return Err(corrupt(format!("{count} indices of {width} bits do not fit {} bytes", body.len())));
    }
    let mut r = BitReader::new(body);
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        let i = r.read(width).expect("length checked");
        if i >= dims.len() as u64 || indices.last().is_some_and(|&p| p >= i) {
            return Err(corrupt(format!("index {i} out of order or range")));
        }
        indices.push(i);
    }
    Ok(OutlierSet { indices, dims })
}

/// Outlier rate in percent.
pub fn olr_percent(n_outliers: usize, total: usize) -> f64 {
    100.0 * n_outliers as f64 / total as f64
}

/// Regulated-mode guard: a value is kept only if it lies within `abs` of
/// the decompressed value; otherwise the decompressed value is used.
pub fn regulate(enhanced: f64, decompressed: f64, abs: f64) -> f64 {
    if (enhanced - decompressed).abs() > abs {
        decompressed
    } else {
        enhanced
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_outlier() {
        let set = find_outliers(&[1.0], &[1.6], Dims::new(1, 1, 1), 0.5).unwrap();
        assert_eq!(set.indices(), &[0]);
        assert!(find_outliers(&[1.0], &[1.0], Dims::new(1, 1, 1), 0.5).unwrap().is_empty());
        // equality is in bound
        assert!(find_outliers(&[1.0], &[1.5], Dims::new(1, 1, 1), 0.5).unwrap().is_empty());
    }

    #[test]
    fn matches_scan_oracle_on_random_pair() {
        let dims = Dims::new(16, 16, 16);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-0.2..0.2)).collect();
        let got = find_outliers(&a, &b, dims, 0.1).unwrap();
        let mut oracle = Vec::new();
        for i in 0..a.len() {
            if (a[i] - b[i]).abs() > 0.1 {
                oracle.push(i as u64);
            }
        }
        assert_eq!(got.indices(), &oracle[..]);
        assert!(find_outliers(&a, &b[1..], dims, 0.1).is_err());
    }

    #[test]
    fn replacement_cases() {
        let dims = Dims::new(4, 4, 4);
        let enh: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let dec: Vec<f64> = (0..64).map(|i| -(i as f64)).collect();
        assert_eq!(apply_replacement(&enh, &dec, &OutlierSet::empty(dims)).unwrap(), enh);
        let all = OutlierSet::new((0..64).collect(), dims).unwrap();
        assert_eq!(apply_replacement(&enh, &dec, &all).unwrap(), dec);
        let some = OutlierSet::new(vec![3, 17, 40], dims).unwrap();
        let got = apply_replacement(&enh, &dec, &some).unwrap();
        for i in 0..64 {
            let want = if [3, 17, 40].contains(&i) { dec[i] } else { enh[i] };
            assert_eq!(got[i], want);
        }
        assert!(matches!(OutlierSet::new(vec![64], dims), Err(OutlierError::IndexOutOfRange { .. })));
    }

    #[test]
    fn avg_bit_reference_values() {
        assert_eq!(avg_bit(Dims::new(512, 512, 512)), 27.0);
        assert!((avg_bit(Dims::new(256, 384, 384)) - 25.2).abs() < 0.05);
        assert!((avg_bit(Dims::new(100, 500, 500)) - 24.6).abs() < 0.05);
    }

    #[test]
    fn overhead_accounting() {
        let o = coords_overhead_bits(1000, Dims::new(512, 512, 512));
        assert_eq!(o.theoretical, 27000.0);
        let z = coords_overhead_bits(0, Dims::new(512, 512, 512));
        assert_eq!((z.theoretical, z.packed_payload), (0.0, 0));
        assert_eq!(z.packed, 40);
        assert_eq!(coords_overhead_bits(10, Dims::new(4, 4, 4)).packed_payload, 60);
    }

    #[test]
    fn packing_layout() {
        let dims = Dims::new(4, 4, 4);
        let empty = pack_coords(&OutlierSet::empty(dims));
        assert_eq!(empty, vec![0, 0, 0, 0, 6]);
        let set = OutlierSet::new(vec![0, 10, 63], dims).unwrap();
        let blob = pack_coords(&set);
        // 000000 001010 111111 -> 00000000 10101111 11000000
        assert_eq!(blob, vec![3, 0, 0, 0, 6, 0b0000_0000, 0b1010_1111, 0b1100_0000]);
        assert_eq!(unpack_coords(&blob, dims).unwrap(), set);
    }

    #[test]
    fn ten_thousand_indices_round_trip() {
        let dims = Dims::new(64, 64, 64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let idx: Vec<u64> = (0..10_000).map(|_| rng.random_range(0..dims.len() as u64)).collect();
        let set = OutlierSet::new(idx, dims).unwrap();
        assert_eq!(unpack_coords(&pack_coords(&set), dims).unwrap(), set);
    }

    #[test]
    fn corrupt_blobs() {
        let dims = Dims::new(4, 4, 4);
        let blob = pack_coords(&OutlierSet::new(vec![1, 2], dims).unwrap());
        assert!(unpack_coords(&blob[..blob.len() - 1], dims).is_err());
        assert!(unpack_coords(&blob[..3], dims).is_err());
        assert!(unpack_coords(&blob, Dims::new(8, 8, 8)).is_err());
        let mut bad = blob.clone();
        bad[0] = 9;
        assert!(matches!(unpack_coords(&bad, dims), Err(OutlierError::CorruptBlob(_))));
    }

    #[test]
    fn olr_examples() {
        assert_eq!(olr_percent(0, 10_000), 0.0);
        assert_eq!(olr_percent(1, 10_000), 0.01);
        assert!((olr_percent(34, 10_000) - 0.34).abs() < 1e-12);
    }

    #[test]
    fn index_widths() {
        assert_eq!(index_width(Dims::new(4, 4, 4)), 6);
        assert_eq!(index_width(Dims::new(1, 1, 1)), 1);
        assert_eq!(index_width(Dims::new(5, 1, 1)), 3);
        assert_eq!(index_width(Dims::new(512, 512, 512)), 27);
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(d0 in 1usize..20, d1 in 1usize..20, d2 in 1usize..20, picks in prop::collection::vec(any::<u64>(), 0..200)) {
            let dims = Dims::new(d0, d1, d2);
            let n = dims.len() as u64;
            let set = OutlierSet::new(picks.into_iter().map(|p| p % n).collect(), dims).unwrap();
            prop_assert_eq!(unpack_coords(&pack_coords(&set), dims).unwrap(), set);
        }

        #[test]
        fn replacement_restores_bound(vals in prop::collection::vec((-10.0f64..10.0, -1.0f64..1.0, -3.0f64..3.0), 1..300)) {
            let abs = 1.0;
            let dims = Dims::new(vals.len(), 1, 1);
            let orig: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let dec: Vec<f64> = vals.iter().map(|v| v.0 + v.1).collect();
            let enh: Vec<f64> = vals.iter().map(|v| v.0 + v.2).collect();
            let out = find_outliers(&orig, &enh, dims, abs).unwrap();
            let fin = apply_replacement(&enh, &dec, &out).unwrap();
            for (o, f) in orig.iter().zip(&fin) {
                prop_assert!((o - f).abs() <= abs);
            }
        }
    }
}

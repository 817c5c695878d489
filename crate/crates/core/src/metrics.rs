//! Distortion and rate metrics.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0} vs {1} values")]
    ShapeMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("original has zero value range; PSNR is undefined")]
    DegenerateRange,
    #[error("PSNR {psnr} lies outside the baseline curve span [{lo}, {hi}]")]
    Extrapolation { psnr: f64, lo: f64, hi: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Peak signal-to-noise ratio in dB. A perfect reconstruction is a distinct
/// variant rather than a float infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    /// `f64::INFINITY` for [`Psnr::Infinite`].
    pub fn value(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v}"),
            },
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Psnr::Finite(v)),
            Repr::Text(t) if t == "inf" => Ok(Psnr::Infinite),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid PSNR `{t}`"))),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::ShapeMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn max_abs_error(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `20·log10(range(x)) − 10·log10(mse(x, y))`, with the range taken from
/// the original `x`.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<Psnr, MetricsError> {
    let m = mse(x, y)?;
    let (lo, hi) = crate::field::min_max(x);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(MetricsError::DegenerateRange);
    }
    if m == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(20.0 * range.log10() - 10.0 * m.log10()))
}

pub fn compression_ratio(original_bits: u64, container_bits: u64) -> f64 {
    original_bits as f64 / container_bits as f64
}

/// Bits per point including model and coordinate overhead.
pub fn bit_rate(payload_bits: u64, overhead_bits: u64, num_points: usize) -> f64 {
    (payload_bits + overhead_bits) as f64 / num_points as f64
}

/// `−Σ p log2 p` over the nonzero counts.
pub fn first_order_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorHistogram {
    pub lo: f64,
    pub hi: f64,
    /// Counts over `[lo, hi)` in equal-width bins.
    pub bins: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl ErrorHistogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// Bin holding the value `v`, if it is inside the range.
    pub fn bin_of(&self, v: f64) -> Option<usize> {
        if v < self.lo || v >= self.hi {
            return None;
        }
        let w = (self.hi - self.lo) / self.bins.len() as f64;
        Some((((v - self.lo) / w) as usize).min(self.bins.len() - 1))
    }
}

/// Histogram of `y − x` over `[lo, hi)`.
pub fn error_histogram(x: &[f64], y: &[f64], bins: usize, range: (f64, f64)) -> Result<ErrorHistogram, MetricsError> {
    check_pair(x, y)?;
    if bins == 0 || !(range.1 > range.0) {
        return Err(MetricsError::Invalid(format!("{bins} bins over [{}, {})", range.0, range.1)));
    }
    let mut h = ErrorHistogram { lo: range.0, hi: range.1, bins: vec![0; bins], underflow: 0, overflow: 0 };
    for (a, b) in x.iter().zip(y) {
        let e = b - a;
        match h.bin_of(e) {
            Some(i) => h.bins[i] += 1,
            None if e < h.lo => h.underflow += 1,
            None => h.overflow += 1,
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    pub rel_bound: f64,
    pub bit_rate: f64,
    pub psnr: Psnr,
    pub olr_percent: f64,
    pub model_bits: u64,
    pub coords_bits: u64,
    pub payload_bits: u64,
}

pub const RD_CSV_HEADER: &str = "label,rel_bound,bit_rate,psnr,olr_percent,model_bits,coords_bits,payload_bits";

pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{:e},{:.6},{},{:.6},{},{},{}\n",
            p.label, p.rel_bound, p.bit_rate, p.psnr, p.olr_percent, p.model_bits, p.coords_bits, p.payload_bits
        ));
    }
    out
}

/// Percent bit-rate reduction of `(bit_rate, psnr)` against a baseline curve
/// interpolated piecewise linearly from PSNR to bit rate.
pub fn relative_reduction_at_equal_psnr(baseline: &[(f64, f64)], enhanced: (f64, f64)) -> Result<f64, MetricsError> {
    let mut curve: Vec<(f64, f64)> = baseline.iter().filter(|p| p.1.is_finite()).copied().collect();
    if curve.len() < 2 {
        return Err(MetricsError::Invalid("baseline curve needs at least two finite points".into()));
    }
    curve.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (br, p) = enhanced;
    let (lo, hi) = (curve[0].1, curve[curve.len() - 1].1);
    if !(p >= lo && p <= hi) {
        return Err(MetricsError::Extrapolation { psnr: p, lo, hi });
    }
    let base = curve
        .windows(2)
        .find(|w| p >= w[0].1 && p <= w[1].1)
        .map(|w| {
            let (b0, p0) = w[0];
            let (b1, p1) = w[1];
            if p1 == p0 {
                b0.min(b1)
            } else {
                b0 + (b1 - b0) * (p - p0) / (p1 - p0)
            }
        })
        .expect("p lies inside the span");
    Ok(100.0 * (1.0 - br / base))
}

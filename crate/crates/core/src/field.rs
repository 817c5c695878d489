//! 3D scalar fields: raw ingestion, slicing, normalization, padding and
//! a deterministic synthetic generator for desk-scale experiments.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("value count {found} does not match dims {dims:?}")]
    LengthMismatch { dims: [usize; 3], found: usize },
    #[error("dimensions must be positive, got {0:?}")]
    BadDims([usize; 3]),
    #[error("fields in a set must share dims and precision ({0})")]
    Inconsistent(String),
    #[error("duplicate field name `{0}`")]
    DuplicateName(String),
    #[error("invalid slice axis {0}")]
    BadAxis(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point storage precision of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Rounds `x` to the nearest value representable at this precision.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn write_le(self, x: f64, out: &mut Vec<u8>) {
        match self {
            Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }

    /// Reads one value from the front of `bytes`. Caller guarantees length.
    pub fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Precision::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Precision::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float" => Ok(Precision::F32),
            "f64" | "double" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Axis-major convention of a raw file on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Last dimension varies fastest (C order).
    Row,
    /// First dimension varies fastest (Fortran order).
    Column,
}

impl std::str::FromStr for Order {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row" => Ok(Order::Row),
            "column" | "col" => Ok(Order::Column),
            other => Err(format!("unknown order `{other}` (expected row or column)")),
        }
    }
}

/// Dimensions `(d0, d1, d2)` of a row-major block; `d2` is fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(d0: usize, d1: usize, d2: usize) -> Self {
        Dims([d0, d1, d2])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.0[1] + j) * self.0[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.0[2];
        let j = (idx / self.0[2]) % self.0[1];
        let i = idx / (self.0[1] * self.0[2]);
        (i, j, k)
    }

    fn validate(&self) -> Result<(), FieldError> {
        if self.0.contains(&0) {
            return Err(FieldError::BadDims(self.0));
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Dims {
    type Output = usize;
    fn index(&self, axis: usize) -> &usize {
        &self.0[axis]
    }
}

/// One named 3D field. Values are stored as `f64` but always hold numbers
/// exactly representable at `precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub name: String,
    pub dims: Dims,
    pub precision: Precision,
    values: Vec<f64>,
}

impl ScalarField {
    /// Builds a field, rounding every value to `precision`.
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        precision: Precision,
        mut values: Vec<f64>,
    ) -> Result<Self, FieldError> {
        dims.validate()?;
        if values.len() != dims.len() {
            return Err(FieldError::LengthMismatch { dims: dims.0, found: values.len() });
        }
        for (index, v) in values.iter_mut().enumerate() {
            *v = precision.round(*v);
            if !v.is_finite() {
                return Err(FieldError::NonFinite { index });
            }
        }
        Ok(ScalarField { name: name.into(), dims, precision, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.dims.index(i, j, k)]
    }

    /// `(min, max)` over all values.
    pub fn min_max(&self) -> (f64, f64) {
        min_max(&self.values)
    }

    pub fn value_range(&self) -> f64 {
        let (lo, hi) = self.min_max();
        hi - lo
    }

    /// Little-endian raw bytes in row-major order.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.precision.bytes());
        for &v in &self.values {
            self.precision.write_le(v, &mut out);
        }
        out
    }

    pub fn store_raw(&self, path: impl AsRef<Path>) -> Result<(), FieldError> {
        fs::write(path, self.to_raw_bytes())?;
        Ok(())
    }

    /// Copy of this field with a different name.
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        ScalarField { name: name.into(), ..self.clone() }
    }

    /// Sub-block of `count` planes along axis 0 starting at `start`.
    pub fn slab(&self, start: usize, count: usize) -> ScalarField {
        let plane = self.dims[1] * self.dims[2];
        let values = self.values[start * plane..(start + count) * plane].to_vec();
        ScalarField {
            name: self.name.clone(),
            dims: Dims::new(count, self.dims[1], self.dims[2]),
            precision: self.precision,
            values,
        }
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Reads a headerless little-endian raw file.
pub fn load_raw(
    path: impl AsRef<Path>,
    name: impl Into<String>,
    dims: Dims,
    precision: Precision,
    order: Order,
) -> Result<ScalarField, FieldError> {
    let bytes = fs::read(path)?;
    from_raw_bytes(&bytes, name, dims, precision, order)
}

pub fn from_raw_bytes(
    bytes: &[u8],
    name: impl Into<String>,
    dims: Dims,
    precision: Precision,
    order: Order,
) -> Result<ScalarField, FieldError> {
    dims.validate()?;
    let width = precision.bytes();
    let expected = dims.len() * width;
    if bytes.len() != expected {
        return Err(FieldError::SizeMismatch { expected, found: bytes.len() });
    }
    let raw: Vec<f64> = bytes.chunks_exact(width).map(|c| precision.read_le(c)).collect();
    if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
        return Err(FieldError::NonFinite { index });
    }
    let values = match order {
        Order::Row => raw,
        Order::Column => {
            let [d0, d1, d2] = dims.0;
            let mut out = vec![0.0; raw.len()];
            for k in 0..d2 {
                for j in 0..d1 {
                    for i in 0..d0 {
                        out[dims.index(i, j, k)] = raw[i + d0 * (j + d1 * k)];
                    }
                }
            }
            out
        }
    };
    ScalarField::new(name, dims, precision, values)
}

/// Ordered fields sharing dims and precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSet {
    fields: Vec<ScalarField>,
}

impl FieldSet {
    pub fn new(fields: Vec<ScalarField>) -> Result<Self, FieldError> {
        if let Some(first) = fields.first() {
            for f in &fields[1..] {
                if f.dims != first.dims {
                    return Err(FieldError::Inconsistent(format!(
                        "`{}` has dims {:?}, `{}` has {:?}",
                        first.name, first.dims.0, f.name, f.dims.0
                    )));
                }
                if f.precision != first.precision {
                    return Err(FieldError::Inconsistent(format!(
                        "`{}` and `{}` differ in precision",
                        first.name, f.name
                    )));
                }
            }
        }
        for (i, f) in fields.iter().enumerate() {
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(FieldError::DuplicateName(f.name.clone()));
            }
        }
        Ok(FieldSet { fields })
    }

    pub fn fields(&self) -> &[ScalarField] {
        &self.fields
    }

    pub fn into_fields(self) -> Vec<ScalarField> {
        self.fields
    }

    pub fn get(&self, name: &str) -> Option<&ScalarField> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn dims(&self) -> Option<Dims> {
        self.fields.first().map(|f| f.dims)
    }

    pub fn precision(&self) -> Option<Precision> {
        self.fields.first().map(|f| f.precision)
    }
}

/// A dense 2D plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "plane data length");
        Plane { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// All 2D sections of a field perpendicular to `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub axis: usize,
    pub slice_dims: (usize, usize),
    pub slices: Vec<Plane>,
}

impl SliceStack {
    pub fn count(&self) -> usize {
        self.slices.len()
    }

    /// Inverse of [`slice_stack`]: row-major values of the original block.
    pub fn reassemble(&self) -> Vec<f64> {
        let (h, w) = self.slice_dims;
        let dims = match self.axis {
            0 => Dims::new(self.count(), h, w),
            1 => Dims::new(h, self.count(), w),
            _ => Dims::new(h, w, self.count()),
        };
        let mut out = vec![0.0; dims.len()];
        for (s, plane) in self.slices.iter().enumerate() {
            for a in 0..h {
                for b in 0..w {
                    let idx = match self.axis {
                        0 => dims.index(s, a, b),
                        1 => dims.index(a, s, b),
                        _ => dims.index(a, b, s),
                    };
                    out[idx] = plane.at(a, b);
                }
            }
        }
        out
    }
}

pub fn slice_dims(dims: Dims, axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    }
}

/// Slices `values` (row-major with `dims`) perpendicular to `axis`.
pub fn slice_values(values: &[f64], dims: Dims, axis: usize) -> Result<SliceStack, FieldError> {
    if axis > 2 {
        return Err(FieldError::BadAxis(axis));
    }
    let (h, w) = slice_dims(dims, axis);
    let slices = (0..dims[axis])
        .map(|s| {
            let mut data = Vec::with_capacity(h * w);
            for a in 0..h {
                for b in 0..w {
                    let idx = match axis {
                        0 => dims.index(s, a, b),
                        1 => dims.index(a, s, b),
                        _ => dims.index(a, b, s),
                    };
                    data.push(values[idx]);
                }
            }
            Plane::new(h, w, data)
        })
        .collect();
    Ok(SliceStack { axis, slice_dims: (h, w), slices })
}

pub fn slice_stack(field: &ScalarField, axis: usize) -> Result<SliceStack, FieldError> {
    slice_values(field.values(), field.dims, axis)
}

/// Min-max normalization parameters. `hi == lo` maps everything to 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub lo: f64,
    pub hi: f64,
}

impl NormParams {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(hi >= lo);
        NormParams { lo, hi }
    }

    pub fn from_values(values: &[f64]) -> Self {
        let (lo, hi) = min_max(values);
        NormParams { lo, hi }
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        if self.hi > self.lo {
            (x - self.lo) / (self.hi - self.lo)
        } else {
            0.5
        }
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        if self.hi > self.lo {
            self.lo + y * (self.hi - self.lo)
        } else {
            self.lo
        }
    }
}

pub fn minmax_normalize(values: &[f64], params: NormParams) -> Vec<f64> {
    values.iter().map(|&x| params.normalize(x)).collect()
}

pub fn minmax_denormalize(values: &[f64], params: NormParams) -> Vec<f64> {
    values.iter().map(|&y| params.denormalize(y)).collect()
}

/// Region of a padded plane holding the original data (origin is top-left).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub plane: Plane,
    pub crop: CropBox,
    /// Set when a unit-length dimension made reflection impossible and the
    /// edge value was replicated instead.
    pub edge_replicated: bool,
}

/// Smallest multiple of `multiple` that is ≥ `n`.
pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Mirror index into `0..n` without duplicating the edge sample.
#[inline]
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads bottom and right by reflection so both dims are multiples of `multiple`.
pub fn pad_reflect(plane: &Plane, multiple: usize) -> Padded {
    let multiple = multiple.max(1);
    let (ph, pw) = (round_up(plane.h, multiple), round_up(plane.w, multiple));
    let edge_replicated =
        multiple > 1 && ((plane.h == 1 && ph > 1) || (plane.w == 1 && pw > 1));
    let mut data = Vec::with_capacity(ph * pw);
    for y in 0..ph {
        let sy = reflect_index(y, plane.h);
        for x in 0..pw {
            data.push(plane.at(sy, reflect_index(x, plane.w)));
        }
    }
    Padded {
        plane: Plane::new(ph, pw, data),
        crop: CropBox { h: plane.h, w: plane.w },
        edge_replicated,
    }
}

pub fn crop(plane: &Plane, crop: CropBox) -> Plane {
    let mut data = Vec::with_capacity(crop.h * crop.w);
    for y in 0..crop.h {
        data.extend_from_slice(&plane.data[y * plane.w..y * plane.w + crop.w]);
    }
    Plane::new(crop.h, crop.w, data)
}

/// Parameters of the coupled synthetic dataset.
///
/// Aux field 0 is box-smoothed unit Gaussian noise `A`. Further aux fields
/// are `(A + S_k)/√2` with independent smoothed noise `S_k`. The target is
/// `alpha·A + beta·A² + gamma·S_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dims: Dims,
    pub aux_fields: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Box filter half-width, applied separably along every axis.
    pub radius: usize,
    /// Number of box filter passes; repeated passes approach a Gaussian.
    pub passes: usize,
    pub precision: Precision,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dims: Dims::new(64, 64, 64),
            aux_fields: 2,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.3,
            radius: 2,
            passes: 3,
            precision: Precision::F32,
        }
    }
}

pub const SYNTH_TARGET: &str = "target";

pub fn synth_aux_name(k: usize) -> String {
    format!("aux{k}")
}

/// Separable periodic box filter of half-width `radius`.
fn box_smooth(values: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let mut cur = values.to_vec();
    let width = (2 * radius + 1) as f64;
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / stride) % n;
            let base = idx - pos * stride;
            let mut acc = 0.0;
            for off in 0..=2 * radius {
                let p = (pos + n * (radius + 1) + off - radius) % n;
                acc += cur[base + p * stride];
            }
            *out = acc / width;
        }
        cur = next;
    }
    cur
}

/// Deterministic coupled dataset: `target` first, then `aux0..`.
pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<FieldSet, FieldError> {
    spec.dims.validate()?;
    let n = spec.dims.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let smoothed_noise = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        (0..spec.passes).fold(raw, |v, _| box_smooth(&v, spec.dims, spec.radius))
    };

    let driver = smoothed_noise(&mut rng);
    let mut aux = vec![driver.clone()];
    for _ in 1..spec.aux_fields {
        let own = smoothed_noise(&mut rng);
        aux.push(
            driver
                .iter()
                .zip(&own)
                .map(|(a, s)| (a + s) * std::f64::consts::FRAC_1_SQRT_2)
                .collect(),
        );
    }
    let indep = smoothed_noise(&mut rng);
    let target: Vec<f64> = driver
        .iter()
        .zip(&indep)
        .map(|(&a, &s)| spec.alpha * a + spec.beta * a * a + spec.gamma * s)
        .collect();

    let mut fields = vec![ScalarField::new(SYNTH_TARGET, spec.dims, spec.precision, target)?];
    if spec.aux_fields > 0 {
        for (k, values) in aux.into_iter().enumerate() {
            fields.push(ScalarField::new(synth_aux_name(k), spec.dims, spec.precision, values)?);
        }
    }
    FieldSet::new(fields)
}

/// Binary PGM (P5, 8-bit) rendering of a plane. With `log_scale`, values
/// are shifted to start at 1 and mapped through `ln` before scaling.
pub fn plane_to_pgm(plane: &Plane, log_scale: bool) -> Vec<u8> {
    let (lo, hi) = min_max(&plane.data);
    let map = |v: f64| -> f64 {
        if log_scale {
            (v - lo + 1.0).ln()
        } else {
            v - lo
        }
    };
    let top = map(hi);
    let mut out = format!("P5\n{} {}\n255\n", plane.w, plane.h).into_bytes();
    out.extend(plane.data.iter().map(|&v| {
        if top > 0.0 {
            (map(v) / top * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

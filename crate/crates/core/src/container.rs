//! The `.nlz` container. The byte layout is documented in FORMAT.md.

use thiserror::Error;

use crate::field::{Dims, NormParams, Precision};
use crate::outlier::BoundMode;

pub const MAGIC: &[u8; 8] = b"NRLZ1\0\0\0";
pub const VERSION: u32 = 1;
pub const FILE_HEADER_LEN: usize = 56;
pub const RECORD_HEADER_LEN: usize = 8;
pub const SECTION_HEADER_LEN: usize = 16;

/// Header flag: at least one field fell back to the decompressed data
/// because training diverged.
pub const FLAG_DIVERGED: u32 = 1;
/// Header flag: at least one enhancer was dropped by the rate fallback.
pub const FLAG_RATE_FALLBACK: u32 = 2;

/// Record flag: enhancer training diverged.
pub const RECORD_DIVERGED: u32 = 1;
/// Record flag: enhancer dropped because it did not pay for itself.
pub const RECORD_RATE_FALLBACK: u32 = 2;

const fn tag(s: &[u8; 4]) -> u32 {
    u32::from_le_bytes(*s)
}

pub const TAG_NAME: u32 = tag(b"NAME");
pub const TAG_BLOCK: u32 = tag(b"BLCK");
pub const TAG_ABS: u32 = tag(b"ABSB");
pub const TAG_FLAGS: u32 = tag(b"FLAG");
pub const TAG_PAYLOAD: u32 = tag(b"PAYL");
pub const TAG_WEIGHTS: u32 = tag(b"WGHT");
pub const TAG_NORM: u32 = tag(b"NORM");
pub const TAG_OUT_NORM: u32 = tag(b"ONRM");
pub const TAG_AUX: u32 = tag(b"AUXN");
pub const TAG_OUTLIERS: u32 = tag(b"OUTL");

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),
    #[error("section length mismatch: {0}")]
    SectionLengthMismatch(String),
    #[error("invalid container: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Slab of the field along axis 0 covered by a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRange {
    pub start: usize,
    pub count: usize,
}

/// Everything needed to rerun an enhancer at reconstruction time.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerRecord {
    /// Serialized weight blob.
    pub weights: Vec<u8>,
    /// One entry per input channel: the target first, then each aux field.
    pub input_norms: Vec<NormParams>,
    pub aux_names: Vec<String>,
    /// Present for direct-target models, which predict normalized values.
    pub output_norm: Option<NormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRecord {
    pub name: String,
    pub block: BlockRange,
    pub abs: f64,
    pub flags: u32,
    /// Baseline codec payload.
    pub payload: Vec<u8>,
    pub enhancer: Option<EnhancerRecord>,
    /// Packed outlier coordinates (strict mode).
    pub outliers: Option<Vec<u8>>,
    /// Sections this version does not understand, kept verbatim.
    pub extra: Vec<(u32, Vec<u8>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub flags: u32,
    pub dims: Dims,
    pub precision: Precision,
    pub axis: usize,
    pub mode: BoundMode,
    pub rel: f64,
    pub records: Vec<FieldRecord>,
}

impl Container {
    pub fn new(dims: Dims, precision: Precision, axis: usize, mode: BoundMode, rel: f64) -> Self {
        Container { flags: 0, dims, precision, axis, mode, rel, records: Vec::new() }
    }

    /// Records for `name`, in block order.
    pub fn records_for<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a FieldRecord> + 'a {
        self.records.iter().filter(move |r| r.name == name)
    }

    /// Distinct field names in first-appearance order.
    pub fn field_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.records {
            if !names.contains(&r.name.as_str()) {
                names.push(&r.name);
            }
        }
        names
    }

    pub fn validate(&self) -> Result<(), ContainerError> {
        let invalid = |m: String| Err(ContainerError::Invalid(m));
        if self.axis > 2 {
            return invalid(format!("slice axis {}", self.axis));
        }
        let names = self.field_names();
        for r in &self.records {
            if r.block.start + r.block.count > self.dims[0] || r.block.count == 0 {
                return invalid(format!("record `{}` block {:?} outside d0={}", r.name, r.block, self.dims[0]));
            }
            if let Some(e) = &r.enhancer {
                if let Some(a) = e.aux_names.iter().find(|a| !names.contains(&a.as_str())) {
                    return invalid(format!("record `{}` references unknown aux field `{a}`", r.name));
                }
                if e.input_norms.len() != e.aux_names.len() + 1 {
                    return invalid(format!("record `{}` has {} norms for {} channels", r.name, e.input_norms.len(), e.aux_names.len() + 1));
                }
            }
        }
        Ok(())
    }
}

fn pad8(out: &mut Vec<u8>) {
    while !out.len().is_multiple_of(8) {
        out.push(0);
    }
}

fn put_section(out: &mut Vec<u8>, tag: u32, data: &[u8]) {
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(data);
    pad8(out);
}

fn norms_bytes(norms: &[NormParams]) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + 16 * norms.len());
    b.extend_from_slice(&(norms.len() as u32).to_le_bytes());
    for n in norms {
        b.extend_from_slice(&n.lo.to_le_bytes());
        b.extend_from_slice(&n.hi.to_le_bytes());
    }
    b
}

fn names_bytes(names: &[String]) -> Vec<u8> {
    let mut b = (names.len() as u32).to_le_bytes().to_vec();
    for n in names {
        b.extend_from_slice(&(n.len() as u32).to_le_bytes());
        b.extend_from_slice(n.as_bytes());
    }
    b
}

fn record_sections(r: &FieldRecord) -> Vec<(u32, Vec<u8>)> {
    let mut s = vec![
        (TAG_NAME, r.name.as_bytes().to_vec()),
        (TAG_BLOCK, [(r.block.start as u64).to_le_bytes(), (r.block.count as u64).to_le_bytes()].concat()),
        (TAG_ABS, r.abs.to_le_bytes().to_vec()),
        (TAG_FLAGS, r.flags.to_le_bytes().to_vec()),
        (TAG_PAYLOAD, r.payload.clone()),
    ];
    if let Some(e) = &r.enhancer {
        s.push((TAG_WEIGHTS, e.weights.clone()));
        s.push((TAG_NORM, norms_bytes(&e.input_norms)));
        s.push((TAG_AUX, names_bytes(&e.aux_names)));
        if let Some(o) = e.output_norm {
            s.push((TAG_OUT_NORM, norms_bytes(&[o])));
        }
    }
    if let Some(o) = &r.outliers {
        s.push((TAG_OUTLIERS, o.clone()));
    }
    s.extend(r.extra.iter().cloned());
    s
}

pub fn write_container(c: &Container) -> Result<Vec<u8>, ContainerError> {
    c.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.flags.to_le_bytes());
    for d in c.dims.0 {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&[c.precision.tag(), c.axis as u8, c.mode.tag(), 0]);
    out.extend_from_slice(&(c.records.len() as u32).to_le_bytes());
    out.extend_from_slice(&c.rel.to_le_bytes());
    debug_assert_eq!(out.len(), FILE_HEADER_LEN);
    for r in &c.records {
        let sections = record_sections(r);
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for (t, data) in &sections {
            put_section(&mut out, *t, data);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ContainerError::SectionLengthMismatch(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn mismatch(m: impl Into<String>) -> ContainerError {
    ContainerError::SectionLengthMismatch(m.into())
}

fn parse_norms(b: &[u8]) -> Result<Vec<NormParams>, ContainerError> {
    let mut c = Cursor { bytes: b, pos: 0 };
    let n = c.u32("norm count")? as usize;
    if b.len() != 4 + 16 * n {
        return Err(mismatch(format!("NORM section of {} bytes for {n} entries", b.len())));
    }
    (0..n)
        .map(|_| {
            let lo = f64::from_bits(c.u64("norm")?);
            let hi = f64::from_bits(c.u64("norm")?);
            if !(lo.is_finite() && hi.is_finite() && hi >= lo) {
                return Err(ContainerError::Invalid(format!("normalization range [{lo}, {hi}]")));
            }
            Ok(NormParams { lo, hi })
        })
        .collect()
}

fn parse_names(b: &[u8]) -> Result<Vec<String>, ContainerError> {
    let mut c = Cursor { bytes: b, pos: 0 };
    let n = c.u32("aux count")? as usize;
    let mut names = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = c.u32("aux name length")? as usize;
        let s = c.take(len, "aux name")?;
        names.push(String::from_utf8(s.to_vec()).map_err(|_| ContainerError::Invalid("aux name is not UTF-8".into()))?);
    }
    if c.pos != b.len() {
        return Err(mismatch("trailing bytes in AUXN section"));
    }
    Ok(names)
}

fn fixed<const N: usize>(data: &[u8], what: &str) -> Result<[u8; N], ContainerError> {
    data.try_into().map_err(|_| mismatch(format!("{what} section has {} bytes, expected {N}", data.len())))
}

fn parse_record(c: &mut Cursor) -> Result<FieldRecord, ContainerError> {
    let count = c.u32("record header")?;
    c.u32("record header")?;
    let mut name = None;
    let mut block = None;
    let mut abs = None;
    let mut flags = 0;
    let mut payload = None;
    let mut weights = None;
    let mut norms = None;
    let mut out_norm = None;
    let mut aux = None;
    let mut outliers = None;
    let mut extra = Vec::new();
    for _ in 0..count {
        let t = c.u32("section tag")?;
        c.u32("section header")?;
        let len = usize::try_from(c.u64("section length")?).map_err(|_| mismatch("section length overflows"))?;
        let data = c.take(len, "section body")?;
        let padding = (8 - len % 8) % 8;
        c.take(padding, "section padding")?;
        match t {
            TAG_NAME => {
                name = Some(String::from_utf8(data.to_vec()).map_err(|_| ContainerError::Invalid("name is not UTF-8".into()))?)
            }
            TAG_BLOCK => {
                let b: [u8; 16] = fixed(data, "BLCK")?;
                block = Some(BlockRange {
                    start: u64::from_le_bytes(b[..8].try_into().unwrap()) as usize,
                    count: u64::from_le_bytes(b[8..].try_into().unwrap()) as usize,
                });
            }
            TAG_ABS => abs = Some(f64::from_le_bytes(fixed(data, "ABSB")?)),
            TAG_FLAGS => flags = u32::from_le_bytes(fixed(data, "FLAG")?),
            TAG_PAYLOAD => payload = Some(data.to_vec()),
            TAG_WEIGHTS => weights = Some(data.to_vec()),
            TAG_NORM => norms = Some(parse_norms(data)?),
            TAG_OUT_NORM => {
                let v = parse_norms(data)?;
                if v.len() != 1 {
                    return Err(mismatch("ONRM must hold exactly one entry"));
                }
                out_norm = Some(v[0]);
            }
            TAG_AUX => aux = Some(parse_names(data)?),
            TAG_OUTLIERS => outliers = Some(data.to_vec()),
            other => extra.push((other, data.to_vec())),
        }
    }
    let missing = |what: &str| ContainerError::Invalid(format!("record lacks a {what} section"));
    let enhancer = match (weights, norms, aux) {
        (Some(weights), Some(input_norms), Some(aux_names)) => {
            Some(EnhancerRecord { weights, input_norms, aux_names, output_norm: out_norm })
        }
        (None, None, None) => None,
        _ => return Err(ContainerError::Invalid("incomplete enhancer sections".into())),
    };
    Ok(FieldRecord {
        name: name.ok_or_else(|| missing("NAME"))?,
        block: block.ok_or_else(|| missing("BLCK"))?,
        abs: abs.ok_or_else(|| missing("ABSB"))?,
        flags,
        payload: payload.ok_or_else(|| missing("PAYL"))?,
        enhancer,
        outliers,
        extra,
    })
}

pub fn read_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut c = Cursor { bytes, pos: MAGIC.len() };
    let version = c.u32("header")?;
    if version != VERSION {
        return Err(ContainerError::VersionUnsupported(version));
    }
    let flags = c.u32("header")?;
    let mut d = [0usize; 3];
    for v in &mut d {
        *v = c.u64("header")? as usize;
    }
    let b = c.take(4, "header")?;
    let precision = Precision::from_tag(b[0]).ok_or_else(|| ContainerError::Invalid(format!("precision tag {}", b[0])))?;
    let axis = b[1] as usize;
    let mode = BoundMode::from_tag(b[2]).ok_or_else(|| ContainerError::Invalid(format!("bound mode tag {}", b[2])))?;
    let n = c.u32("header")? as usize;
    let rel = f64::from_bits(c.u64("header")?);
    let mut records = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        records.push(parse_record(&mut c)?);
    }
    if c.pos != bytes.len() {
        return Err(mismatch(format!("{} trailing bytes after {n} records", bytes.len() - c.pos)));
    }
    let container = Container { flags, dims: Dims(d), precision, axis, mode, rel, records };
    container.validate()?;
    Ok(container)
}

/// Bit accounting of a serialized container. The five parts sum to the
/// file size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContainerSizes {
    pub payload_bits: u64,
    pub model_bits: u64,
    pub coords_bits: u64,
    /// Headers, names, bounds, normalization parameters, unknown sections.
    pub metadata_bits: u64,
    /// Zero bytes inserted for 8-byte section alignment.
    pub padding_bits: u64,
    pub total_bits: u64,
}

impl ContainerSizes {
    /// Everything except alignment padding.
    pub fn content_bits(&self) -> u64 {
        self.total_bits - self.padding_bits
    }
}

pub fn container_sizes(c: &Container) -> ContainerSizes {
    let mut s = ContainerSizes { metadata_bits: FILE_HEADER_LEN as u64 * 8, ..Default::default() };
    for r in &c.records {
        s.metadata_bits += RECORD_HEADER_LEN as u64 * 8;
        for (t, data) in record_sections(r) {
            let bits = data.len() as u64 * 8;
            s.metadata_bits += SECTION_HEADER_LEN as u64 * 8;
            s.padding_bits += ((8 - data.len() % 8) % 8) as u64 * 8;
            match t {
                TAG_PAYLOAD => s.payload_bits += bits,
                TAG_WEIGHTS => s.model_bits += bits,
                TAG_OUTLIERS => s.coords_bits += bits,
                _ => s.metadata_bits += bits,
            }
        }
    }
    s.total_bits = s.payload_bits + s.model_bits + s.coords_bits + s.metadata_bits + s.padding_bits;
    s
}

/// Model and coordinate bits attributable to the records of one field.
pub fn record_sizes(r: &FieldRecord) -> ContainerSizes {
    let single = Container {
        flags: 0,
        dims: Dims::new(1, 1, 1),
        precision: Precision::F32,
        axis: 0,
        mode: BoundMode::Strict,
        rel: 0.0,
        records: vec![r.clone()],
    };
    let mut s = container_sizes(&single);
    s.metadata_bits -= FILE_HEADER_LEN as u64 * 8;
    s.total_bits -= FILE_HEADER_LEN as u64 * 8;
    s
}

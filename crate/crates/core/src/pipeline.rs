//! End-to-end compression and reconstruction over a set of fields.
//!
//! Compression runs in two stages. First every field is compressed with the
//! baseline codec, which also yields the decompressed data the decoder will
//! see. Then each target field trains its own enhancer on slices of its
//! decompressed data (plus the decompressed aux fields as extra channels),
//! and the container records everything needed to rerun the enhancer.
//!
//! Enhancement at compression time uses the stored weight blob, read back,
//! through the same code path as reconstruction, so the final values the
//! encoder measures are bit-identical to what the decoder produces.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{abs_bound, compress_block, decompress_block, CodecError, CompressedPayload, DEFAULT_RADIUS};
use crate::container::{
    record_sizes, BlockRange, Container, ContainerError, EnhancerRecord, FieldRecord, FLAG_DIVERGED,
    FLAG_RATE_FALLBACK, RECORD_DIVERGED, RECORD_RATE_FALLBACK,
};
use crate::field::{pad_reflect, slice_values, Dims, FieldError, FieldSet, NormParams, Precision, ScalarField};
use crate::metrics::{max_abs_error, psnr, Psnr, RdPoint};
use crate::net::serialize::{deserialize_weights, serialize_weights};
use crate::net::train::{train, EpochQuality, TrainConfig, TrainLog, TrainSet};
use crate::net::{denorm_residual, forward, residual_target, NetConfig, NetError, TargetMode, Tensor, Weights};
use crate::outlier::{
    apply_replacement, find_outliers_scaled, olr_percent, pack_coords, regulate, unpack_coords, BoundMode,
    OutlierError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("field `{field}`: {source}")]
    Codec { field: String, source: CodecError },
    #[error("field `{field}`: {source}")]
    Net { field: String, source: NetError },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Outlier(#[from] OutlierError),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rel: f64,
    pub radius: u32,
    /// Network template. Input channels, skip connections and target mode
    /// are resolved per field from the aux map and the ablation flags.
    pub net: NetConfig,
    pub train: TrainConfig,
    pub mode: BoundMode,
    pub axis: usize,
    /// Aux fields per target. Targets missing from the map use every other field.
    pub aux: BTreeMap<String, Vec<String>>,
    /// Fields that get an enhancer; `None` means all of them.
    pub targets: Option<Vec<String>>,
    pub single_field: bool,
    pub no_skip: bool,
    pub direct_targets: bool,
    /// Outlier threshold in units of the absolute bound (strict mode).
    pub outlier_multiplier: f64,
    /// Drop an enhancer whose model and coordinate bits cost more than its
    /// PSNR gain is worth.
    pub rate_fallback: bool,
    /// Split every field into slabs of this many planes along axis 0.
    pub block_size: Option<usize>,
    /// Score each epoch's outputs (PSNR, OLR) into the training log.
    pub monitor: bool,
    /// Process fields on the rayon pool. The output does not depend on it.
    pub parallel_fields: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rel: 1e-2,
            radius: DEFAULT_RADIUS,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            mode: BoundMode::Strict,
            axis: 0,
            aux: BTreeMap::new(),
            targets: None,
            single_field: false,
            no_skip: false,
            direct_targets: false,
            outlier_multiplier: 1.0,
            rate_fallback: false,
            block_size: None,
            monitor: false,
            parallel_fields: true,
        }
    }
}

impl PipelineConfig {
    /// Aux channels fed to the enhancer of `target`, in channel order.
    pub fn aux_for(&self, target: &str, set: &FieldSet) -> Vec<String> {
        if self.single_field {
            return Vec::new();
        }
        match self.aux.get(target) {
            Some(list) => list.clone(),
            None => set.names().into_iter().filter(|n| *n != target).map(String::from).collect(),
        }
    }

    /// Network config actually trained for `target`.
    pub fn net_for(&self, target: &str, set: &FieldSet) -> NetConfig {
        NetConfig {
            in_channels: 1 + self.aux_for(target, set).len(),
            skip_connections: self.net.skip_connections && !self.no_skip,
            target_mode: if self.direct_targets { TargetMode::Direct } else { self.net.target_mode },
            ..self.net.clone()
        }
    }

    pub fn is_target(&self, name: &str) -> bool {
        self.targets.as_ref().is_none_or(|t| t.iter().any(|n| n == name))
    }

    pub fn validate(&self, set: &FieldSet) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.rel > 0.0 && self.rel.is_finite()) {
            return bad(format!("relative bound must be positive, got {}", self.rel));
        }
        if self.radius < 1 {
            return bad("quantization radius must be >= 1".into());
        }
        if self.axis > 2 {
            return bad(format!("slice axis {} (expected 0, 1 or 2)", self.axis));
        }
        if !(self.outlier_multiplier > 0.0 && self.outlier_multiplier.is_finite()) {
            return bad(format!("outlier multiplier {}", self.outlier_multiplier));
        }
        if self.block_size == Some(0) {
            return bad("block size must be >= 1".into());
        }
        let names = set.names();
        for (target, aux) in &self.aux {
            if !names.contains(&target.as_str()) {
                return bad(format!("aux map names unknown target `{target}`"));
            }
            if let Some(a) = aux.iter().find(|a| !names.contains(&a.as_str())) {
                return bad(format!("aux map for `{target}` names unknown field `{a}`"));
            }
            if aux.contains(target) {
                return bad(format!("`{target}` lists itself as an aux field"));
            }
        }
        if let Some(t) = self.targets.iter().flatten().find(|t| !names.contains(&t.as_str())) {
            return bad(format!("unknown target field `{t}`"));
        }
        for name in names.iter().filter(|n| self.is_target(n)) {
            self.net_for(name, set).validate().map_err(|source| PipelineError::Net { field: name.to_string(), source })?;
        }
        self.train.validate().map_err(|source| PipelineError::Net { field: String::new(), source })?;
        Ok(())
    }
}

/// Per-field summary produced at compression time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldReport {
    pub name: String,
    pub abs: f64,
    /// At least one block kept its enhancer.
    pub enhanced: bool,
    pub diverged: bool,
    pub rate_fallback: bool,
    /// `None` when the original field is constant.
    pub psnr_decompressed: Option<Psnr>,
    /// Enhanced data before outlier replacement.
    pub psnr_initial: Option<Psnr>,
    pub psnr_final: Option<Psnr>,
    pub max_error_final: f64,
    /// Points of the initial enhanced data beyond `abs · outlier_multiplier`.
    pub outliers: usize,
    pub olr_percent: f64,
    pub payload_bits: u64,
    pub model_bits: u64,
    pub coords_bits: u64,
    /// Payload bits per point.
    pub bit_rate_baseline: f64,
    /// Payload, model and coordinate bits per point.
    pub bit_rate: f64,
    /// One log per block that trained.
    pub train_logs: Vec<TrainLog>,
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub container: Container,
    pub reports: Vec<FieldReport>,
}

/// Slabs of `count` planes along axis 0 (the last one may be shorter).
pub fn block_ranges(d0: usize, block_size: Option<usize>) -> Vec<BlockRange> {
    let size = block_size.unwrap_or(d0).clamp(1, d0.max(1));
    (0..d0).step_by(size).map(|start| BlockRange { start, count: size.min(d0 - start) }).collect()
}

fn block_dims(dims: Dims, b: BlockRange) -> Dims {
    Dims::new(b.count, dims[1], dims[2])
}

fn block_span(dims: Dims, b: BlockRange) -> std::ops::Range<usize> {
    let plane = dims[1] * dims[2];
    b.start * plane..(b.start + b.count) * plane
}

fn map_fields<T, R, F>(parallel: bool, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    if parallel {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Linear index in a block of the point `(a, b)` of slice `s`.
fn slice_point(dims: Dims, axis: usize, s: usize, a: usize, b: usize) -> usize {
    match axis {
        0 => dims.index(s, a, b),
        1 => dims.index(a, s, b),
        _ => dims.index(a, b, s),
    }
}

/// Normalized, padded input tensors for every slice of a block. Channel 0
/// is the target's decompressed data, followed by the aux fields.
fn build_inputs(
    channels: &[&[f64]],
    norms: &[NormParams],
    dims: Dims,
    axis: usize,
    multiple: usize,
) -> Result<Vec<Tensor>> {
    let mut tensors: Vec<Tensor> = Vec::new();
    for (c, (values, norm)) in channels.iter().zip(norms).enumerate() {
        let normalized: Vec<f64> = values.iter().map(|&v| norm.normalize(v)).collect();
        let stack = slice_values(&normalized, dims, axis)?;
        for (s, plane) in stack.slices.iter().enumerate() {
            let padded = pad_reflect(plane, multiple).plane;
            if c == 0 {
                let mut t = Tensor::zeros(channels.len(), padded.h, padded.w);
                t.data[..padded.data.len()].copy_from_slice(&padded.data);
                tensors.push(t);
            } else {
                let t = &mut tensors[s];
                let n = t.plane();
                t.data[c * n..(c + 1) * n].copy_from_slice(&padded.data);
            }
        }
    }
    Ok(tensors)
}

/// Padded per-slice training targets in `[0, 1]`.
fn build_targets(values: &[f64], dims: Dims, axis: usize, multiple: usize) -> Result<Vec<Vec<f64>>> {
    let stack = slice_values(values, dims, axis)?;
    Ok(stack.slices.iter().map(|p| pad_reflect(p, multiple).plane.data).collect())
}

/// Everything that turns raw network outputs into enhanced values.
struct Decoder<'a> {
    dims: Dims,
    axis: usize,
    decompressed: &'a [f64],
    abs: f64,
    precision: Precision,
    output_norm: Option<NormParams>,
}

impl Decoder<'_> {
    /// Crops each padded output, maps it back to data space and applies the
    /// `|x̂ − x'| ≤ abs` guard after rounding to storage precision.
    fn assemble(&self, outputs: &[Vec<f64>], padded_w: usize) -> Vec<f64> {
        let (h, w) = crate::field::slice_dims(self.dims, self.axis);
        let mut out = vec![0.0; self.dims.len()];
        for (s, o) in outputs.iter().enumerate() {
            for a in 0..h {
                for b in 0..w {
                    let idx = slice_point(self.dims, self.axis, s, a, b);
                    let y = o[a * padded_w + b];
                    let dec = self.decompressed[idx];
                    let x = match self.output_norm {
                        None => dec + denorm_residual(y, self.abs),
                        Some(n) => n.denormalize(y),
                    };
                    out[idx] = regulate(self.precision.round(x), dec, self.abs);
                }
            }
        }
        out
    }

    fn enhance(&self, weights: &Weights, inputs: &[Tensor]) -> std::result::Result<Vec<f64>, NetError> {
        let outputs = inputs
            .par_iter()
            .map(|x| forward(weights, x).map(|t| t.data))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let padded_w = inputs.first().map_or(0, |t| t.w);
        Ok(self.assemble(&outputs, padded_w))
    }
}

fn safe_psnr(x: &[f64], y: &[f64]) -> Option<Psnr> {
    psnr(x, y).ok()
}

/// PSNR gain in dB, or `None` when it cannot be compared.
fn psnr_gain(before: Option<Psnr>, after: Option<Psnr>) -> Option<f64> {
    match (before?, after?) {
        (Psnr::Infinite, _) => None,
        (Psnr::Finite(_), Psnr::Infinite) => Some(f64::INFINITY),
        (Psnr::Finite(a), Psnr::Finite(b)) => Some(b - a),
    }
}

struct Baseline {
    abs: f64,
    payloads: Vec<Vec<u8>>,
    decompressed: Vec<f64>,
}

fn baseline(field: &ScalarField, cfg: &PipelineConfig, blocks: &[BlockRange]) -> Result<Baseline> {
    let codec = |source| PipelineError::Codec { field: field.name.clone(), source };
    let bound = abs_bound(cfg.rel, field).map_err(codec)?;
    let mut payloads = Vec::with_capacity(blocks.len());
    let mut decompressed = Vec::with_capacity(field.len());
    for b in blocks {
        let (payload, dec) = compress_block(&field.slab(b.start, b.count), &bound, cfg.radius).map_err(codec)?;
        payloads.push(payload.bytes);
        decompressed.extend_from_slice(dec.values());
    }
    Ok(Baseline { abs: bound.abs, payloads, decompressed })
}

struct BlockOutcome {
    record: FieldRecord,
    /// Enhanced values before outlier replacement.
    initial: Vec<f64>,
    values: Vec<f64>,
    outliers: usize,
    log: Option<TrainLog>,
}

#[allow(clippy::too_many_arguments)]
fn enhance_block(
    set: &FieldSet,
    field_idx: usize,
    bases: &[Baseline],
    block: BlockRange,
    block_idx: usize,
    cfg: &PipelineConfig,
    net: &NetConfig,
    aux: &[String],
) -> Result<BlockOutcome> {
    let field = &set.fields()[field_idx];
    let name = &field.name;
    let dims = field.dims;
    let span = block_span(dims, block);
    let bdims = block_dims(dims, block);
    let base = &bases[field_idx];
    let abs = base.abs;
    let original = &field.values()[span.clone()];
    let dec = &base.decompressed[span.clone()];
    let plain = FieldRecord {
        name: name.clone(),
        block,
        abs,
        flags: 0,
        payload: base.payloads[block_idx].clone(),
        enhancer: None,
        outliers: None,
        extra: Vec::new(),
    };
    let net_err = |source| PipelineError::Net { field: name.clone(), source };

    let mut channels: Vec<&[f64]> = vec![dec];
    for a in aux {
        let idx = set.names().iter().position(|n| n == a).expect("aux names validated");
        channels.push(&bases[idx].decompressed[span.clone()]);
    }
    let norms: Vec<NormParams> = channels.iter().map(|c| NormParams::from_values(c)).collect();
    let multiple = net.size_multiple();
    let inputs = build_inputs(&channels, &norms, bdims, cfg.axis, multiple)?;
    let output_norm = (net.target_mode == TargetMode::Direct).then(|| NormParams::from_values(original));
    let target_values: Vec<f64> = match output_norm {
        None => original.iter().zip(dec).map(|(&x, &d)| residual_target(x - d, abs)).collect(),
        Some(n) => original.iter().map(|&x| n.normalize(x)).collect(),
    };
    let data = TrainSet { inputs, targets: build_targets(&target_values, bdims, cfg.axis, multiple)? };

    let decoder = Decoder { dims: bdims, axis: cfg.axis, decompressed: dec, abs, precision: field.precision, output_norm };
    let threshold = cfg.outlier_multiplier;
    let padded_w = data.inputs.first().map_or(0, |t| t.w);
    let monitor = |outputs: &[Vec<f64>]| {
        let enhanced = decoder.assemble(outputs, padded_w);
        let outliers = original.iter().zip(&enhanced).filter(|(x, e)| (*x - *e).abs() > abs * threshold).count();
        EpochQuality {
            psnr: safe_psnr(original, &enhanced).map_or(f64::NAN, Psnr::value),
            olr_percent: olr_percent(outliers, original.len()),
        }
    };
    let monitor_ref: Option<&crate::net::train::Monitor> = if cfg.monitor { Some(&monitor) } else { None };

    let (weights, log) = match train(&data, net, &cfg.train, monitor_ref) {
        Ok(r) => r,
        Err(NetError::Diverged { .. }) => {
            let record = FieldRecord { flags: RECORD_DIVERGED, ..plain };
            return Ok(BlockOutcome { record, initial: dec.to_vec(), values: dec.to_vec(), outliers: 0, log: None });
        }
        Err(e) => return Err(net_err(e)),
    };
    let blob = serialize_weights(&weights, field.precision).map_err(net_err)?;
    let stored = deserialize_weights(&blob).map_err(net_err)?;
    let initial = decoder.enhance(&stored, &data.inputs).map_err(net_err)?;
    let outlier_set = find_outliers_scaled(original, &initial, bdims, abs, cfg.outlier_multiplier)?;
    let (values, coords) = match cfg.mode {
        BoundMode::Strict => (apply_replacement(&initial, dec, &outlier_set)?, Some(pack_coords(&outlier_set))),
        BoundMode::Regulated => (initial.clone(), None),
    };
    let record = FieldRecord {
        enhancer: Some(EnhancerRecord { weights: blob, input_norms: norms, aux_names: aux.to_vec(), output_norm }),
        outliers: coords,
        ..plain.clone()
    };

    if cfg.rate_fallback {
        let overhead = (record_sizes(&record).total_bits - record_sizes(&plain).total_bits) as f64 / original.len() as f64;
        let gain = psnr_gain(safe_psnr(original, dec), safe_psnr(original, &values));
        // Each bit per point buys about 6.02 dB, so the enhancer pays for
        // itself when its overhead in bits per point is below gain / 6.02.
        if !gain.is_some_and(|g| overhead < g / 6.02) {
            let record = FieldRecord { flags: RECORD_RATE_FALLBACK, ..plain };
            return Ok(BlockOutcome { record, initial: dec.to_vec(), values: dec.to_vec(), outliers: 0, log: Some(log) });
        }
    }
    Ok(BlockOutcome { record, initial, values, outliers: outlier_set.len(), log: Some(log) })
}

fn compress_field(
    set: &FieldSet,
    field_idx: usize,
    bases: &[Baseline],
    blocks: &[BlockRange],
    cfg: &PipelineConfig,
) -> Result<(Vec<FieldRecord>, FieldReport)> {
    let field = &set.fields()[field_idx];
    let base = &bases[field_idx];
    let is_target = cfg.is_target(&field.name);
    let net = cfg.net_for(&field.name, set);
    let aux = cfg.aux_for(&field.name, set);
    let mut records = Vec::with_capacity(blocks.len());
    let mut values = Vec::with_capacity(field.len());
    let mut initial = Vec::with_capacity(field.len());
    let mut outliers = 0;
    let mut logs = Vec::new();
    for (bi, &b) in blocks.iter().enumerate() {
        if is_target {
            let o = enhance_block(set, field_idx, bases, b, bi, cfg, &net, &aux)?;
            records.push(o.record);
            values.extend(o.values);
            initial.extend(o.initial);
            outliers += o.outliers;
            logs.extend(o.log);
        } else {
            records.push(FieldRecord {
                name: field.name.clone(),
                block: b,
                abs: base.abs,
                flags: 0,
                payload: base.payloads[bi].clone(),
                enhancer: None,
                outliers: None,
                extra: Vec::new(),
            });
            values.extend_from_slice(&base.decompressed[block_span(field.dims, b)]);
            initial.extend_from_slice(&base.decompressed[block_span(field.dims, b)]);
        }
    }

    let original = field.values();
    let n = original.len();
    let sizes: Vec<_> = records.iter().map(record_sizes).collect();
    let payload_bits: u64 = sizes.iter().map(|s| s.payload_bits).sum();
    let model_bits: u64 = sizes.iter().map(|s| s.model_bits).sum();
    let coords_bits: u64 = sizes.iter().map(|s| s.coords_bits).sum();
    let report = FieldReport {
        name: field.name.clone(),
        abs: base.abs,
        enhanced: records.iter().any(|r| r.enhancer.is_some()),
        diverged: records.iter().any(|r| r.flags & RECORD_DIVERGED != 0),
        rate_fallback: records.iter().any(|r| r.flags & RECORD_RATE_FALLBACK != 0),
        psnr_decompressed: safe_psnr(original, &base.decompressed),
        psnr_initial: safe_psnr(original, &initial),
        psnr_final: safe_psnr(original, &values),
        max_error_final: max_abs_error(original, &values).unwrap_or(0.0),
        outliers,
        olr_percent: olr_percent(outliers, n),
        payload_bits,
        model_bits,
        coords_bits,
        bit_rate_baseline: payload_bits as f64 / n as f64,
        bit_rate: (payload_bits + model_bits + coords_bits) as f64 / n as f64,
        train_logs: logs,
    };
    Ok((records, report))
}

/// Compresses every field of `set` into one container.
pub fn compress(set: &FieldSet, cfg: &PipelineConfig) -> Result<Compressed> {
    let (dims, precision) = match (set.dims(), set.precision()) {
        (Some(d), Some(p)) => (d, p),
        _ => return Err(PipelineError::Config("field set is empty".into())),
    };
    if let Some(f) = set.fields().iter().find(|f| f.values().iter().any(|v| !v.is_finite())) {
        return Err(PipelineError::Config(format!("field `{}` has non-finite values", f.name)));
    }
    cfg.validate(set)?;
    let blocks = block_ranges(dims[0], cfg.block_size);
    let bases = map_fields(cfg.parallel_fields, set.fields(), |_, f| baseline(f, cfg, &blocks))?;
    let per_field = map_fields(cfg.parallel_fields, set.fields(), |i, _| compress_field(set, i, &bases, &blocks, cfg))?;

    let mut container = Container::new(dims, precision, cfg.axis, cfg.mode, cfg.rel);
    let mut reports = Vec::with_capacity(per_field.len());
    for (records, report) in per_field {
        container.records.extend(records);
        reports.push(report);
    }
    for r in &container.records {
        if r.flags & RECORD_DIVERGED != 0 {
            container.flags |= FLAG_DIVERGED;
        }
        if r.flags & RECORD_RATE_FALLBACK != 0 {
            container.flags |= FLAG_RATE_FALLBACK;
        }
    }
    container.validate()?;
    Ok(Compressed { container, reports })
}

/// Per-field summary produced at reconstruction time. PSNR and the observed
/// maximum error are only known when a reference is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructReport {
    pub name: String,
    pub abs: f64,
    pub enhanced: bool,
    /// Stored outlier coordinates.
    pub outliers: usize,
    pub olr_percent: f64,
    pub payload_bits: u64,
    pub model_bits: u64,
    pub coords_bits: u64,
    pub bit_rate: f64,
    pub psnr_decompressed: Option<Psnr>,
    pub psnr_final: Option<Psnr>,
    pub max_error_final: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub fields: FieldSet,
    pub decompressed: FieldSet,
    pub reports: Vec<ReconstructReport>,
}

/// Decodes every field of `c`. With a `reference`, reports also carry PSNR
/// and maximum error against it.
pub fn reconstruct(c: &Container, reference: Option<&FieldSet>) -> Result<Reconstruction> {
    c.validate()?;
    let dims = c.dims;
    let names: Vec<String> = c.field_names().into_iter().map(String::from).collect();
    let invalid = |m: String| PipelineError::Container(ContainerError::Invalid(m));

    let mut decompressed: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for name in &names {
        let mut values = Vec::with_capacity(dims.len());
        let mut next = 0;
        for r in c.records_for(name) {
            if r.block.start != next {
                return Err(invalid(format!("field `{name}` blocks are not contiguous at plane {next}")));
            }
            let dec = decompress_block(&CompressedPayload { bytes: r.payload.clone() }, name)
                .map_err(|source| PipelineError::Codec { field: name.clone(), source })?;
            if dec.dims != block_dims(dims, r.block) || dec.precision != c.precision {
                return Err(invalid(format!("field `{name}` payload shape disagrees with its block")));
            }
            values.extend_from_slice(dec.values());
            next += r.block.count;
        }
        if next != dims[0] {
            return Err(invalid(format!("field `{name}` covers {next} of {} planes", dims[0])));
        }
        decompressed.push(values);
    }

    let per_field: Vec<(Vec<f64>, usize)> = names
        .iter()
        .enumerate()
        .map(|(fi, name)| {
            let mut values = Vec::with_capacity(dims.len());
            let mut outliers = 0;
            for r in c.records_for(name) {
                let span = block_span(dims, r.block);
                let dec = &decompressed[fi][span.clone()];
                let Some(e) = &r.enhancer else {
                    values.extend_from_slice(dec);
                    continue;
                };
                let net_err = |source| PipelineError::Net { field: name.clone(), source };
                let weights = deserialize_weights(&e.weights).map_err(net_err)?;
                if weights.config.in_channels != e.aux_names.len() + 1 {
                    return Err(invalid(format!("field `{name}` weights expect {} channels", weights.config.in_channels)));
                }
                if (weights.config.target_mode == TargetMode::Direct) != e.output_norm.is_some() {
                    return Err(invalid(format!("field `{name}` target mode and output norm disagree")));
                }
                let mut channels: Vec<&[f64]> = vec![dec];
                for a in &e.aux_names {
                    let ai = names.iter().position(|n| n == a).expect("validated");
                    channels.push(&decompressed[ai][span.clone()]);
                }
                let bdims = block_dims(dims, r.block);
                let inputs = build_inputs(&channels, &e.input_norms, bdims, c.axis, weights.config.size_multiple())?;
                let decoder = Decoder {
                    dims: bdims,
                    axis: c.axis,
                    decompressed: dec,
                    abs: r.abs,
                    precision: c.precision,
                    output_norm: e.output_norm,
                };
                let enhanced = decoder.enhance(&weights, &inputs).map_err(net_err)?;
                match &r.outliers {
                    Some(blob) => {
                        let set = unpack_coords(blob, bdims)?;
                        outliers += set.len();
                        values.extend(apply_replacement(&enhanced, dec, &set)?);
                    }
                    None => values.extend(enhanced),
                }
            }
            Ok((values, outliers))
        })
        .collect::<Result<_>>()?;

    let mut fields = Vec::with_capacity(names.len());
    let mut dec_fields = Vec::with_capacity(names.len());
    let mut reports = Vec::with_capacity(names.len());
    for ((name, (values, outliers)), dec) in names.iter().zip(per_field).zip(decompressed) {
        let sizes: Vec<_> = c.records_for(name).map(record_sizes).collect();
        let payload_bits: u64 = sizes.iter().map(|s| s.payload_bits).sum();
        let model_bits: u64 = sizes.iter().map(|s| s.model_bits).sum();
        let coords_bits: u64 = sizes.iter().map(|s| s.coords_bits).sum();
        let original = match reference {
            Some(set) => Some(
                set.get(name)
                    .filter(|f| f.dims == dims)
                    .ok_or_else(|| PipelineError::Config(format!("reference lacks field `{name}` with dims {dims:?}")))?
                    .values(),
            ),
            None => None,
        };
        let n = values.len();
        reports.push(ReconstructReport {
            name: name.clone(),
            abs: c.records_for(name).next().map_or(0.0, |r| r.abs),
            enhanced: c.records_for(name).any(|r| r.enhancer.is_some()),
            outliers,
            olr_percent: olr_percent(outliers, n),
            payload_bits,
            model_bits,
            coords_bits,
            bit_rate: (payload_bits + model_bits + coords_bits) as f64 / n as f64,
            psnr_decompressed: original.and_then(|o| safe_psnr(o, &dec)),
            psnr_final: original.and_then(|o| safe_psnr(o, &values)),
            max_error_final: original.and_then(|o| max_abs_error(o, &values).ok()),
        });
        fields.push(ScalarField::new(name.clone(), dims, c.precision, values)?);
        dec_fields.push(ScalarField::new(name.clone(), dims, c.precision, dec)?);
    }
    Ok(Reconstruction { fields: FieldSet::new(fields)?, decompressed: FieldSet::new(dec_fields)?, reports })
}

/// A stored enhancer together with the inputs it sees at reconstruction.
#[derive(Debug, Clone)]
pub struct EnhancerView {
    pub name: String,
    pub block: BlockRange,
    pub abs: f64,
    pub axis: usize,
    pub weights: Weights,
    /// One padded tensor per slice of the block.
    pub inputs: Vec<Tensor>,
    pub output_norm: Option<NormParams>,
}

impl EnhancerView {
    /// Padded training targets of the block, built the same way as at
    /// compression time.
    pub fn targets(&self, original: &[f64], decompressed: &[f64], dims: Dims) -> Result<Vec<Vec<f64>>> {
        let bdims = block_dims(dims, self.block);
        let span = block_span(dims, self.block);
        let (orig, dec) = (&original[span.clone()], &decompressed[span]);
        let values: Vec<f64> = match self.output_norm {
            None => orig.iter().zip(dec).map(|(&x, &d)| residual_target(x - d, self.abs)).collect(),
            Some(n) => orig.iter().map(|&x| n.normalize(x)).collect(),
        };
        build_targets(&values, bdims, self.axis, self.weights.config.size_multiple())
    }
}

/// Rebuilds the enhancer of the first enhanced block of `field`, with its
/// inputs taken from the decompressed fields.
pub fn enhancer_view(c: &Container, decompressed: &FieldSet, field: &str) -> Result<EnhancerView> {
    let r = c
        .records_for(field)
        .find(|r| r.enhancer.is_some())
        .ok_or_else(|| PipelineError::Config(format!("field `{field}` has no stored enhancer")))?;
    let e = r.enhancer.as_ref().expect("filtered");
    let weights = deserialize_weights(&e.weights).map_err(|source| PipelineError::Net { field: field.into(), source })?;
    let span = block_span(c.dims, r.block);
    let mut channels: Vec<&[f64]> = Vec::new();
    for name in std::iter::once(field).chain(e.aux_names.iter().map(String::as_str)) {
        let f = decompressed
            .get(name)
            .ok_or_else(|| PipelineError::Config(format!("decompressed set lacks `{name}`")))?;
        channels.push(&f.values()[span.clone()]);
    }
    let inputs =
        build_inputs(&channels, &e.input_norms, block_dims(c.dims, r.block), c.axis, weights.config.size_multiple())?;
    Ok(EnhancerView {
        name: field.into(),
        block: r.block,
        abs: r.abs,
        axis: c.axis,
        weights,
        inputs,
        output_norm: e.output_norm,
    })
}

/// Label of the enhanced points of an RD sweep.
pub fn enhanced_label(cfg: &PipelineConfig) -> &'static str {
    if cfg.single_field {
        "single_field"
    } else {
        "cross_field"
    }
}

/// Runs the pipeline for `target` at each bound and returns a baseline and
/// an enhanced point per bound, in bound order. Bounds must be strictly
/// descending.
pub fn rd_curve(set: &FieldSet, target: &str, bounds: &[f64], cfg: &PipelineConfig) -> Result<Vec<RdPoint>> {
    if bounds.is_empty() || bounds.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(PipelineError::Config(format!("bounds must be nonempty and strictly descending, got {bounds:?}")));
    }
    if set.get(target).is_none() {
        return Err(PipelineError::Config(format!("unknown target field `{target}`")));
    }
    let per_bound = map_fields(cfg.parallel_fields, bounds, |_, &rel| {
        let run = PipelineConfig { rel, targets: Some(vec![target.to_string()]), ..cfg.clone() };
        let out = compress(set, &run)?;
        let r = out.reports.into_iter().find(|r| r.name == target).expect("target report");
        let psnr_of = |p: Option<Psnr>| p.ok_or_else(|| PipelineError::Config(format!("`{target}` is constant; PSNR undefined")));
        Ok([
            RdPoint {
                label: "baseline".into(),
                rel_bound: rel,
                bit_rate: r.bit_rate_baseline,
                psnr: psnr_of(r.psnr_decompressed)?,
                olr_percent: 0.0,
                model_bits: 0,
                coords_bits: 0,
                payload_bits: r.payload_bits,
            },
            RdPoint {
                label: enhanced_label(cfg).into(),
                rel_bound: rel,
                bit_rate: r.bit_rate,
                psnr: psnr_of(r.psnr_final)?,
                olr_percent: r.olr_percent,
                model_bits: r.model_bits,
                coords_bits: r.coords_bits,
                payload_bits: r.payload_bits,
            },
        ])
    })?;
    Ok(per_bound.into_iter().flatten().collect())
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};

use fieldcodec::analysis::{gradient_conflict_matrix, integrated_gradients, per_sample_gradients, sample_conflict_matrix};
use fieldcodec::codec::{abs_bound, external_compress, ExternalTool};
use fieldcodec::container::{read_container, record_sizes, write_container, Container};
use fieldcodec::field::{
    crop, gen_synthetic, load_raw, plane_to_pgm, slice_dims, slice_stack, slice_values, CropBox, Dims, FieldSet, Order,
    Plane, SynthSpec,
};
use fieldcodec::metrics::{max_abs_error, mse, psnr, rd_csv, RdPoint};
use fieldcodec::net::train::TrainConfig;
use fieldcodec::net::Tensor;
use fieldcodec::outlier::olr_percent;
use fieldcodec::pipeline::{self, enhancer_view, PipelineConfig};

use crate::dataset::{extension, parse_pair, DatasetFile, FieldEntry, FieldSource, SynthOrigin};
use crate::manifest::{digest_file, manifest_path, sha256_hex, InputDigest, RunManifest};
use crate::{
    CompressArgs, ConflictArgs, EvalArgs, GenSynthArgs, IgArgs, PipelineArgs, RdcurveArgs, ReconstructArgs,
    SlicePgmArgs,
};

pub const ENV_EXT_COMPRESS: &str = "FIELDCODEC_EXT_COMPRESS";
pub const ENV_EXT_DECOMPRESS: &str = "FIELDCODEC_EXT_DECOMPRESS";

pub struct RunContext {
    pub deterministic: bool,
    pub jobs: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = SynthSpec {
        dims: Dims::new(a.dims[0], a.dims[1], a.dims[2]),
        aux_fields: a.aux,
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
        radius: a.radius,
        passes: a.passes,
        precision: a.precision,
    };
    let set = gen_synthetic(&spec, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut entries = Vec::new();
    for f in set.fields() {
        let file = PathBuf::from(format!("{}.{}", f.name, extension(f.precision)));
        f.store_raw(a.out.join(&file))?;
        entries.push(FieldEntry { name: f.name.clone(), path: file });
    }
    let ds = DatasetFile {
        dims: spec.dims,
        precision: spec.precision,
        order: Order::Row,
        fields: entries,
        synth: Some(SynthOrigin { spec, seed: a.seed }),
    };
    let path = a.out.join("dataset.json");
    write_file(&path, format!("{}\n", serde_json::to_string_pretty(&ds)?).as_bytes())?;
    println!("wrote {} fields to {}", set.len(), path.display());
    Ok(())
}

fn parse_aux(items: &[String]) -> Result<BTreeMap<String, Vec<String>>> {
    let mut map = BTreeMap::new();
    for item in items {
        let (target, list) = item.split_once('=').with_context(|| format!("expected TARGET=AUX1,AUX2, got `{item}`"))?;
        let aux = list.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
        map.insert(target.to_string(), aux);
    }
    Ok(map)
}

fn pipeline_config(p: &PipelineArgs, rel: f64, ctx: &RunContext) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig {
        rel,
        radius: p.radius,
        train: TrainConfig { epochs: p.epochs, batch: p.batch, lr0: p.lr, optimizer: p.optimizer, seed: p.seed },
        mode: p.mode,
        axis: p.axis,
        aux: parse_aux(&p.aux)?,
        targets: p.targets.clone(),
        single_field: p.single_field,
        no_skip: p.no_skip,
        direct_targets: p.direct_targets,
        outlier_multiplier: p.outlier_multiplier,
        rate_fallback: p.rate_fallback,
        block_size: p.block_size,
        monitor: p.monitor,
        parallel_fields: !ctx.deterministic,
        ..Default::default()
    };
    cfg.net.seed = p.seed;
    Ok(cfg)
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

pub fn compress(a: CompressArgs, ctx: &RunContext) -> Result<()> {
    let (source, mut cfg, seed) = match &a.from_manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            m.verify_inputs()?;
            let source = FieldSource {
                dims: m.dims,
                precision: m.precision,
                order: m.order,
                fields: m.inputs.iter().map(|i| (i.name.clone(), i.path.clone())).collect(),
            };
            (source, m.config, m.seed)
        }
        None => (a.input.source()?, pipeline_config(&a.pipeline, a.rel_eb, ctx)?, a.pipeline.seed),
    };
    cfg.parallel_fields = !ctx.deterministic;
    let set = source.load()?;
    let out = pipeline::compress(&set, &cfg)?;
    let bytes = write_container(&out.container)?;
    write_file(&a.out, &bytes)?;

    let inputs = source
        .fields
        .iter()
        .map(|(name, path)| Ok(InputDigest { name: name.clone(), path: path.clone(), sha256: digest_file(path)? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        tool: "fieldcodec".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "compress".into(),
        deterministic: ctx.deterministic,
        jobs: ctx.jobs,
        seed,
        dims: source.dims,
        precision: source.precision,
        order: source.order,
        config: cfg,
        inputs,
        output: a.out.clone(),
        output_sha256: sha256_hex(&bytes),
        reports: out.reports.clone(),
    };
    manifest.store(&manifest_path(&a.out))?;

    println!("{:<12} {:>8} {:>10} {:>10} {:>9} {:>9} {:>8}", "field", "enhanced", "psnr_dec", "psnr_final", "br_base", "br_total", "olr_%");
    for r in &out.reports {
        println!(
            "{:<12} {:>8} {:>10} {:>10} {:>9.4} {:>9.4} {:>8.4}",
            r.name,
            if r.enhanced { "yes" } else { "no" },
            fmt_opt(r.psnr_decompressed.map(|p| format!("{p:.3}"))),
            fmt_opt(r.psnr_final.map(|p| format!("{p:.3}"))),
            r.bit_rate_baseline,
            r.bit_rate,
            r.olr_percent
        );
    }
    println!("wrote {} ({} bytes)", a.out.display(), bytes.len());
    Ok(())
}

fn load_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_container(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let c = load_container(&a.container)?;
    let reference = if a.reference.is_given() { Some(a.reference.source()?.load()?) } else { None };
    let rec = pipeline::reconstruct(&c, reference.as_ref())?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for f in rec.fields.fields() {
        f.store_raw(a.out_dir.join(format!("{}.{}", f.name, extension(f.precision))))?;
    }
    let report = serde_json::to_string_pretty(&rec.reports)?;
    write_file(&a.out_dir.join("report.json"), format!("{report}\n").as_bytes())?;
    println!("{:<12} {:>8} {:>10} {:>10} {:>9} {:>8}", "field", "enhanced", "psnr_dec", "psnr_final", "bit_rate", "olr_%");
    for r in &rec.reports {
        println!(
            "{:<12} {:>8} {:>10} {:>10} {:>9.4} {:>8.4}",
            r.name,
            if r.enhanced { "yes" } else { "no" },
            fmt_opt(r.psnr_decompressed.map(|p| format!("{p:.3}"))),
            fmt_opt(r.psnr_final.map(|p| format!("{p:.3}"))),
            r.bit_rate,
            r.olr_percent
        );
    }
    Ok(())
}

pub const EVAL_CSV_HEADER: &str = "field,psnr,mse,max_abs_error,abs,olr_percent,bit_rate";

pub fn eval(a: EvalArgs) -> Result<()> {
    let source = a.original.source()?;
    let originals = source.load()?;
    let container = a.container.as_deref().map(load_container).transpose()?;
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    for pair in &a.reconstructed {
        let (name, path) = parse_pair(pair)?;
        let orig = originals.get(&name).with_context(|| format!("no original field named `{name}`"))?;
        let rec = load_raw(&path, name.clone(), source.dims, source.precision, source.order)
            .with_context(|| format!("loading {}", path.display()))?;
        let (x, y) = (orig.values(), rec.values());
        let p = psnr(x, y).map(|p| p.to_string()).unwrap_or_else(|_| "nan".into());
        let (mut abs, mut olr, mut br) = (String::new(), String::new(), String::new());
        if let Some(c) = &container {
            let records: Vec<_> = c.records_for(&name).collect();
            ensure!(!records.is_empty(), "container has no field `{name}`");
            let bound = records[0].abs;
            let over = x.iter().zip(y).filter(|(a, b)| (*a - *b).abs() > bound).count();
            let bits: u64 = records.iter().map(|r| {
                let s = record_sizes(r);
                s.payload_bits + s.model_bits + s.coords_bits
            }).sum();
            abs = format!("{bound:e}");
            olr = format!("{:.6}", olr_percent(over, x.len()));
            br = format!("{:.6}", bits as f64 / x.len() as f64);
        }
        csv.push_str(&format!("{name},{p},{:e},{:e},{abs},{olr},{br}\n", mse(x, y)?, max_abs_error(x, y)?));
    }
    match &a.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn external_tool() -> Result<ExternalTool> {
    let get = |k: &str| std::env::var(k).with_context(|| format!("--external needs {k} to be set"));
    Ok(ExternalTool { compress: get(ENV_EXT_COMPRESS)?, decompress: get(ENV_EXT_DECOMPRESS)? })
}

pub fn rdcurve(a: RdcurveArgs, ctx: &RunContext) -> Result<()> {
    let set = a.input.source()?.load()?;
    let cfg = pipeline_config(&a.pipeline, a.bounds.first().copied().unwrap_or(1e-2), ctx)?;
    let mut points = pipeline::rd_curve(&set, &a.target, &a.bounds, &cfg)?;
    if a.external {
        let tool = external_tool()?;
        let field = set.get(&a.target).with_context(|| format!("unknown target `{}`", a.target))?;
        for &rel in &a.bounds {
            let bound = abs_bound(rel, field)?;
            let (payload, dec) = external_compress(&tool, field, &bound)?;
            let bits = payload.len() as u64 * 8;
            points.push(RdPoint {
                label: "external".into(),
                rel_bound: rel,
                bit_rate: bits as f64 / field.len() as f64,
                psnr: psnr(field.values(), dec.values())?,
                olr_percent: 0.0,
                model_bits: 0,
                coords_bits: 0,
                payload_bits: bits,
            });
        }
    }
    let csv = rd_csv(&points);
    match &a.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn analyze_ig(a: IgArgs) -> Result<()> {
    let c = load_container(&a.container)?;
    let rec = pipeline::reconstruct(&c, None)?;
    let view = enhancer_view(&c, &rec.decompressed, &a.target)?;
    let input = view
        .inputs
        .get(a.slice)
        .with_context(|| format!("slice {} outside 0..{}", a.slice, view.inputs.len()))?;
    let baseline = Tensor::from_vec(input.c, input.h, input.w, vec![a.baseline; input.data.len()]);
    let map = integrated_gradients(&view.weights, input, &baseline, (a.y, a.x), a.steps)?;
    write_file(&with_suffix(&a.out_prefix, ".csv"), map.to_csv().as_bytes())?;
    for (k, plane) in map.channels.iter().enumerate() {
        let magnitude = Plane::new(plane.h, plane.w, plane.data.iter().map(|v| v.abs()).collect());
        write_file(&with_suffix(&a.out_prefix, &format!("_c{k}.pgm")), &plane_to_pgm(&magnitude, true))?;
    }
    let gap = map.completeness_gap();
    let delta = map.output - map.baseline_output;
    println!("output {:.6e}  baseline output {:.6e}  sum of attributions {:.6e}", map.output, map.baseline_output, map.total());
    println!("completeness gap {:.3e} ({:.4}% of the output change)", gap, 100.0 * gap / delta.abs().max(f64::MIN_POSITIVE));
    for (k, t) in map.channel_totals().iter().enumerate() {
        println!("channel {k}: {t:.6e}");
    }
    Ok(())
}

fn cropped_channels(t: &Tensor, h: usize, w: usize) -> Vec<f64> {
    (0..t.c)
        .flat_map(|c| crop(&Plane::new(t.h, t.w, t.channel(c).to_vec()), CropBox { h, w }).data)
        .collect()
}

pub fn analyze_conflicts(a: ConflictArgs) -> Result<()> {
    let c = load_container(&a.container)?;
    let originals: FieldSet = a.original.source()?.load()?;
    let rec = pipeline::reconstruct(&c, None)?;
    let view = enhancer_view(&c, &rec.decompressed, &a.target)?;
    let orig = originals.get(&a.target).with_context(|| format!("no original field named `{}`", a.target))?;
    let dec = rec.decompressed.get(&a.target).expect("reconstructed fields match the container");
    ensure!(orig.dims == c.dims, "original dims {:?} differ from container dims {:?}", orig.dims, c.dims);

    let n = a.count.unwrap_or(view.inputs.len()).min(view.inputs.len());
    if n < 2 {
        bail!("need at least two slices, have {n}");
    }
    let bdims = Dims::new(view.block.count, c.dims[1], c.dims[2]);
    let (h, w) = slice_dims(bdims, view.axis);
    let plane = c.dims[1] * c.dims[2];
    let span = view.block.start * plane..(view.block.start + view.block.count) * plane;
    let residual: Vec<f64> =
        orig.values()[span.clone()].iter().zip(&dec.values()[span]).map(|(x, d)| x - d).collect();
    let residual_slices = slice_values(&residual, bdims, view.axis)?;

    let sample_inputs: Vec<Vec<f64>> = view.inputs[..n].iter().map(|t| cropped_channels(t, h, w)).collect();
    let sample_targets: Vec<Vec<f64>> = residual_slices.slices[..n].iter().map(|p| p.data.clone()).collect();
    let samples = sample_conflict_matrix(&sample_inputs, &sample_targets, a.hi, a.lo)?;

    let targets = view.targets(orig.values(), dec.values(), c.dims)?;
    let grads = per_sample_gradients(&view.weights, &view.inputs[..n], &targets[..n])?;
    let gradients = gradient_conflict_matrix(&grads, a.threshold)?;

    for (tag, m) in [("samples", &samples), ("gradients", &gradients)] {
        write_file(&with_suffix(&a.out_prefix, &format!("_{tag}.csv")), m.to_csv().as_bytes())?;
        write_file(&with_suffix(&a.out_prefix, &format!("_{tag}.pgm")), &m.to_pgm())?;
        println!(
            "{tag}: {} conflicting pairs of {n} slices; {:.4}% of unordered pairs, {:.4}% of all n² entries",
            m.pairs(),
            m.proportion_unordered(),
            m.proportion_ordered()
        );
    }
    Ok(())
}

pub fn slice_pgm(a: SlicePgmArgs) -> Result<()> {
    let dims = Dims::new(a.dims[0], a.dims[1], a.dims[2]);
    let name = a.input.file_stem().and_then(|s| s.to_str()).unwrap_or("field").to_string();
    let field = load_raw(&a.input, name, dims, a.precision, a.order)?;
    let stack = slice_stack(&field, a.axis)?;
    let plane = stack
        .slices
        .get(a.index)
        .with_context(|| format!("slice {} outside 0..{}", a.index, stack.count()))?;
    write_file(&a.out, &plane_to_pgm(plane, a.log))?;
    Ok(())
}

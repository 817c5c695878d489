//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test` with the default harness disabled. Failures are
//! reported but only fail the process when `FIELDCODEC_ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fieldcodec::analysis::{cosine, gradient_conflict_matrix, integrated_gradients, per_sample_gradients, sample_conflict_matrix};
use fieldcodec::analysis::{SAMPLE_HI, SAMPLE_LO};
use fieldcodec::codec::huffman::{huffman_decode, huffman_encode};
use fieldcodec::codec::{abs_bound, compress_block, decompress_block, DEFAULT_RADIUS};
use fieldcodec::container::{container_sizes, read_container, write_container, Container};
use fieldcodec::field::{crop, gen_synthetic, slice_dims, slice_values, CropBox, Dims, FieldSet, Plane, Precision, ScalarField, SynthSpec};
use fieldcodec::metrics::{first_order_entropy, psnr, relative_reduction_at_equal_psnr};
use fieldcodec::net::gradcheck::{check_layers, check_network};
use fieldcodec::net::train::TrainConfig;
use fieldcodec::net::{forward, NetConfig, Tensor, INPUT_CENTER};
use fieldcodec::outlier::{avg_bit, BoundMode};
use fieldcodec::pipeline::{compress, enhancer_view, reconstruct, Compressed, FieldReport, PipelineConfig};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Verdict {
    id: u8,
    pass: bool,
    detail: String,
}

fn verdict(id: u8, pass: bool, detail: String) -> Verdict {
    Verdict { id, pass, detail }
}

fn shipped(seed: u64) -> FieldSet {
    gen_synthetic(&SynthSpec::default(), seed).expect("synthetic dataset")
}

fn seeded(mut cfg: PipelineConfig, seed: u64) -> PipelineConfig {
    cfg.net.seed = seed;
    cfg.train.seed = seed;
    cfg
}

fn target_report(c: &Compressed) -> &FieldReport {
    c.reports.iter().find(|r| r.name == "target").expect("target report")
}

fn psnr_of(r: &FieldReport) -> (f64, f64) {
    (r.psnr_decompressed.expect("finite").value(), r.psnr_final.expect("finite").value())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Points whose reconstruction misses the original by more than `k·abs`,
/// decoding the container from its serialized bytes.
fn violations(set: &FieldSet, c: &Container, k: f64) -> (usize, usize, f64) {
    let bytes = write_container(c).expect("serialize");
    let rec = reconstruct(&read_container(&bytes).expect("parse"), None).expect("reconstruct");
    let (mut bad, mut total, mut worst) = (0, 0, 0.0f64);
    for f in set.fields() {
        let abs = c.records_for(&f.name).next().expect("record").abs;
        let out = rec.fields.get(&f.name).expect("field");
        for (x, y) in f.values().iter().zip(out.values()) {
            let e = (x - y).abs();
            worst = worst.max(e / abs);
            bad += usize::from(e > k * abs);
            total += 1;
        }
    }
    (bad, total, worst)
}

fn c1() -> Verdict {
    let cases = [((512, 512, 512), 27.0, 0.0), ((256, 384, 384), 25.2, 0.05), ((100, 500, 500), 24.6, 0.05)];
    let mut pass = true;
    let mut parts = Vec::new();
    for ((a, b, c), want, tol) in cases {
        let got = avg_bit(Dims::new(a, b, c));
        pass &= if tol == 0.0 { got == want } else { (got - want).abs() <= tol };
        parts.push(format!("({a},{b},{c})={got:.4}"));
    }
    verdict(1, pass, parts.join(" "))
}

/// Strict runs over every field, then the same containers with their
/// coordinates stripped, then untrained regulated runs.
fn c2_c3() -> (Verdict, Verdict) {
    let (mut strict_bad, mut strict_worst, mut runs, mut points) = (0, 0.0f64, 0, 0);
    let (mut reg_bad, mut reg_worst) = (0, 0.0f64);
    for seed in SEEDS {
        let set = shipped(seed);
        for rel in [1e-2, 1e-3] {
            let cfg = seeded(PipelineConfig { rel, mode: BoundMode::Strict, ..Default::default() }, seed);
            let mut c = compress(&set, &cfg).expect("strict compress").container;
            let (bad, total, worst) = violations(&set, &c, 1.0);
            strict_bad += bad;
            strict_worst = strict_worst.max(worst);
            points = total;
            runs += 1;

            for r in &mut c.records {
                r.outliers = None;
            }
            c.mode = BoundMode::Regulated;
            let (bad, _, worst) = violations(&set, &c, 2.0);
            reg_bad += bad;
            reg_worst = reg_worst.max(worst);

            let untrained = PipelineConfig {
                mode: BoundMode::Regulated,
                train: TrainConfig { epochs: 0, ..cfg.train.clone() },
                ..cfg.clone()
            };
            let c0 = compress(&set, &untrained).expect("epoch-0 compress").container;
            let (bad, _, worst) = violations(&set, &c0, 2.0);
            reg_bad += bad;
            reg_worst = reg_worst.max(worst);
        }
    }
    (
        verdict(
            2,
            strict_bad == 0 && points == 786_432,
            format!("{runs} runs x {points} points, {strict_bad} violations, max error {strict_worst:.4}·abs"),
        ),
        verdict(
            3,
            reg_bad == 0,
            format!("{} runs (stripped strict + epoch 0), {reg_bad} violations, max error {reg_worst:.4}·abs", 2 * runs),
        ),
    )
}

fn random_field(rng: &mut ChaCha8Rng) -> ScalarField {
    let dims = Dims::new(rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16));
    let precision = if rng.random_bool(0.5) { Precision::F32 } else { Precision::F64 };
    let scale = 10f64.powi(rng.random_range(-3..4));
    let kind = rng.random_range(0..4);
    let values = (0..dims.len())
        .map(|idx| {
            let (i, j, k) = dims.coords(idx);
            scale
                * match kind {
                    0 => (i as f64 * 0.4).sin() + (j as f64 * 0.3).cos() * (k as f64 * 0.2).sin(),
                    1 => rng.random_range(-1.0..1.0),
                    2 => if rng.random_bool(0.05) { rng.random_range(-50.0..50.0) } else { 0.1 * i as f64 },
                    _ => 3.25,
                }
        })
        .collect();
    ScalarField::new("f", dims, precision, values).expect("field")
}

fn c4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut bad_points, mut bad_trips) = (0, 0);
    for _ in 0..200 {
        let field = random_field(&mut rng);
        let rel = 10f64.powf(rng.random_range(-5.0..-1.0));
        let radius = [DEFAULT_RADIUS, 4, 64][rng.random_range(0..3)];
        let bound = abs_bound(rel, &field).expect("bound");
        let (payload, recon) = compress_block(&field, &bound, radius).expect("compress");
        bad_points += field.values().iter().zip(recon.values()).filter(|(x, y)| (*x - *y).abs() > bound.abs).count();
        let decoded = decompress_block(&payload, "f").expect("decompress");
        let same = decoded.values().iter().zip(recon.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        bad_trips += usize::from(!same || decoded.dims != field.dims);
    }
    let symbols: Vec<u32> =
        (0..1_000_000).map(|_| if rng.random_bool(0.7) { rng.random_range(0..16) } else { rng.random_range(0..70_000) }).collect();
    let (bytes, table, _) = huffman_encode(&symbols);
    let huff = huffman_decode(&bytes, &table, symbols.len()).map(|d| d == symbols).unwrap_or(false);
    verdict(
        4,
        bad_points == 0 && bad_trips == 0 && huff,
        format!("200 fields: {bad_points} bound violations, {bad_trips} round-trip mismatches; 10^6-symbol Huffman round trip {}", if huff { "exact" } else { "MISMATCH" }),
    )
}

fn c5() -> Verdict {
    let mut checks = check_layers(5);
    checks.extend(check_network(&NetConfig::default(), 16, 16, 5).expect("network check"));
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let names: Vec<String> = checks.iter().map(|c| format!("{}={:.1e}", c.name, c.max_rel_error)).collect();
    verdict(5, worst < 1e-4, format!("max relative error {worst:.2e} ({})", names.join(", ")))
}

struct Runs {
    cross: Vec<Compressed>,
    single: Vec<Compressed>,
    direct: Vec<Compressed>,
    no_skip: Vec<Compressed>,
}

fn target_runs() -> Runs {
    let base = PipelineConfig { targets: Some(vec!["target".into()]), monitor: true, ..Default::default() };
    let run = |cfg: &PipelineConfig| -> Vec<Compressed> {
        SEEDS.iter().map(|&s| compress(&shipped(s), &seeded(cfg.clone(), s)).expect("compress")).collect()
    };
    Runs {
        cross: run(&base),
        single: run(&PipelineConfig { single_field: true, ..base.clone() }),
        direct: run(&PipelineConfig { direct_targets: true, ..base.clone() }),
        no_skip: run(&PipelineConfig { no_skip: true, ..base.clone() }),
    }
}

fn c6(runs: &Runs) -> Verdict {
    let r = target_report(&runs.cross[0]);
    let (dec, fin) = psnr_of(r);
    let log = &r.train_logs[0].epochs;
    let olr = |i: usize| log[i].olr_percent.expect("monitored");
    let (first, last) = (olr(0), olr(log.len() - 1));
    verdict(
        6,
        fin - dec >= 1.0 && last < first,
        format!(
            "seed 1: PSNR {dec:.3} -> {fin:.3} dB (gain {:.3}, need >= 1.0); OLR epoch 1 {first:.3}% -> epoch {} {last:.3}% (need a decrease)",
            fin - dec,
            log.len()
        ),
    )
}

fn finals(v: &[Compressed]) -> Vec<f64> {
    v.iter().map(|c| psnr_of(target_report(c)).1).collect()
}

fn c7(runs: &Runs) -> Verdict {
    let (cross, single) = (finals(&runs.cross), finals(&runs.single));
    let (mc, ms) = (mean(&cross), mean(&single));
    verdict(
        7,
        mc >= ms + 0.5,
        format!("mean over seeds 1-3: cross-field {mc:.3} dB vs single-field {ms:.3} dB (diff {:.3}, need >= 0.5); per seed {cross:.3?} vs {single:.3?}", mc - ms),
    )
}

fn c8(runs: &Runs) -> Verdict {
    let (res, dir, skip) = (mean(&finals(&runs.cross)), mean(&finals(&runs.direct)), mean(&finals(&runs.no_skip)));
    verdict(
        8,
        res >= dir - 0.1 && res >= skip - 0.1,
        format!("mean final PSNR: residual {res:.3} vs direct {dir:.3}; skip-on {res:.3} vs skip-off {skip:.3} dB"),
    )
}

fn c9(runs: &Runs) -> Verdict {
    let p = psnr(&[0.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).expect("psnr").value();
    let h = first_order_entropy(&[2, 1, 1]);
    let red = relative_reduction_at_equal_psnr(&[(2.0, 80.0), (4.0, 90.0)], (2.5, 85.0)).expect("interpolation");

    let c = &runs.cross[0];
    let bytes = write_container(&c.container).expect("serialize");
    let s = container_sizes(&c.container);
    let parts = s.payload_bits + s.model_bits + s.coords_bits + s.metadata_bits + s.padding_bits;
    let reported: u64 = c.reports.iter().map(|r| r.payload_bits + r.model_bits + r.coords_bits).sum();
    let file_ok = s.total_bits == bytes.len() as u64 * 8 && parts == s.total_bits && reported == s.payload_bits + s.model_bits + s.coords_bits;
    verdict(
        9,
        (p - 16.812).abs() <= 1e-3 && h == 1.5 && (red - 16.7).abs() <= 0.1 && file_ok,
        format!(
            "PSNR {p:.4} dB, entropy {h}, reduction {red:.3}%, file {} bits = payload {} + model {} + coords {} + metadata {} + padding {}",
            bytes.len() * 8,
            s.payload_bits,
            s.model_bits,
            s.coords_bits,
            s.metadata_bits,
            s.padding_bits
        ),
    )
}

/// Brute-force n×n conflict matrix over every ordered pair.
fn oracle(n: usize, conflict: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    let mut m = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = u8::from(i != j && conflict(i, j));
        }
    }
    m
}

fn cropped_channels(t: &Tensor, h: usize, w: usize) -> Vec<f64> {
    (0..t.c).flat_map(|c| crop(&Plane::new(t.h, t.w, t.channel(c).to_vec()), CropBox { h, w }).data).collect()
}

fn c10(runs: &Runs) -> Verdict {
    let set = shipped(SEEDS[0]);
    let container = &runs.cross[0].container;
    let rec = reconstruct(container, None).expect("reconstruct");
    let view = enhancer_view(container, &rec.decompressed, "target").expect("enhancer");

    // IG on the center slice, mid-gray baseline, at the best-conditioned pixel
    let input = &view.inputs[view.inputs.len() / 2];
    let base = Tensor::from_vec(input.c, input.h, input.w, vec![INPUT_CENTER; input.data.len()]);
    let (fx, f0) = (forward(&view.weights, input).expect("forward"), forward(&view.weights, &base).expect("forward"));
    let k = (0..fx.data.len())
        .max_by(|&a, &b| (fx.data[a] - f0.data[a]).abs().total_cmp(&(fx.data[b] - f0.data[b]).abs()))
        .expect("pixels");
    let px = (k / input.w, k % input.w);
    let gap = |steps| {
        let m = integrated_gradients(&view.weights, input, &base, px, steps).expect("ig");
        m.completeness_gap() / (m.output - m.baseline_output).abs()
    };
    let (g256, g1024) = (gap(256), gap(1024));

    // conflicts over the first 16 slices of the trained block
    let n = 16;
    let dims = container.dims;
    let orig = set.get("target").expect("target");
    let dec = rec.decompressed.get("target").expect("target");
    let bdims = Dims::new(view.block.count, dims[1], dims[2]);
    let (h, w) = slice_dims(bdims, view.axis);
    let span = view.block.start * dims[1] * dims[2]..(view.block.start + view.block.count) * dims[1] * dims[2];
    let residual: Vec<f64> = orig.values()[span.clone()].iter().zip(&dec.values()[span]).map(|(x, d)| x - d).collect();
    let res_slices = slice_values(&residual, bdims, view.axis).expect("slices");
    let xs: Vec<Vec<f64>> = view.inputs[..n].iter().map(|t| cropped_channels(t, h, w)).collect();
    let ys: Vec<Vec<f64>> = res_slices.slices[..n].iter().map(|p| p.data.clone()).collect();
    let samples = sample_conflict_matrix(&xs, &ys, SAMPLE_HI, SAMPLE_LO).expect("samples");
    let want_samples = oracle(n, |i, j| cosine(&xs[i], &xs[j]).abs() > SAMPLE_HI && cosine(&ys[i], &ys[j]).abs() < SAMPLE_LO);

    let targets = view.targets(orig.values(), dec.values(), dims).expect("targets");
    let grads = per_sample_gradients(&view.weights, &view.inputs[..n], &targets[..n]).expect("grads");
    let gradients = gradient_conflict_matrix(&grads, 0.0).expect("gradients");
    let zero = |g: &[f64]| g.iter().all(|&v| v == 0.0);
    let want_grads = oracle(n, |i, j| !zero(&grads[i]) && !zero(&grads[j]) && cosine(&grads[i], &grads[j]) < 0.0);

    let exact = samples.entries == want_samples && gradients.entries == want_grads;
    verdict(
        10,
        g256 < 1e-3 && exact,
        format!(
            "IG at slice {} pixel {px:?}: completeness gap {:.4}% at 256 steps (need < 0.1%), {:.4}% at 1024; conflict matrices n=16 {} the brute-force oracles ({} sample, {} gradient pairs)",
            view.inputs.len() / 2,
            100.0 * g256,
            100.0 * g1024,
            if exact { "equal" } else { "DIFFER FROM" },
            samples.pairs(),
            gradients.pairs()
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_fieldcodec"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn c11() -> Verdict {
    let dir = tempfile::tempdir().expect("tempdir");
    let p = |name: &str| dir.path().join(name).to_str().expect("utf-8 path").to_string();
    let ok = run_cli(&["gen-synth", "--out", &p("data"), "--seed", "1"]);
    let ds = p("data/dataset.json");
    let compress_to = |out: &str| run_cli(&["--deterministic", "compress", "--dataset", &ds, "-o", out, "--seed", "7"]);
    let ok = ok && compress_to(&p("a.nlz")) && compress_to(&p("b.nlz"));
    let read = |name: &str| std::fs::read(Path::new(&p(name))).unwrap_or_default();
    let (a, b) = (read("a.nlz"), read("b.nlz"));
    verdict(11, ok && !a.is_empty() && a == b, format!("two deterministic runs: {} and {} bytes, {}", a.len(), b.len(), if a == b { "identical" } else { "DIFFERENT" }))
}

fn main() {
    let started = Instant::now();
    let mut verdicts = vec![c1()];
    let (v2, v3) = c2_c3();
    verdicts.extend([v2, v3, c4(), c5()]);
    let runs = target_runs();
    verdicts.extend([c6(&runs), c7(&runs), c8(&runs), c9(&runs), c10(&runs), c11()]);
    verdicts.sort_by_key(|v| v.id);

    println!();
    for v in &verdicts {
        println!("criterion {}: {} {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} of {} criteria pass ({:.0} s)", verdicts.len() - failed, verdicts.len(), started.elapsed().as_secs_f64());
    if failed > 0 && std::env::var("FIELDCODEC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

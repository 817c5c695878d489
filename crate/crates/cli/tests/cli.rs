use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldcodec"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).env_remove("RUST_BACKTRACE").output().expect("spawn fieldcodec");
    assert!(
        out.status.success(),
        "fieldcodec {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 16³ synthetic dataset in a fresh temp dir.
fn dataset(seed: u64) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["gen-synth", "--out", s(&data), "--dims", "16", "16", "16", "--seed", &seed.to_string()]);
    let json = data.join("dataset.json");
    (dir, json)
}

fn compress(ds: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["--deterministic", "compress", "--dataset", s(ds), "-o", s(out), "--epochs", "2", "--targets", "target"];
    args.extend_from_slice(extra);
    run(&args);
}

fn manifest(container: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(container.with_extension("manifest.json")).unwrap()).unwrap()
}

#[test]
fn compress_reconstruct_eval_round_trip() {
    let (dir, ds) = dataset(1);
    let nlz = dir.path().join("out.nlz");
    compress(&ds, &nlz, &[]);
    let rec = dir.path().join("rec");
    run(&["reconstruct", s(&nlz), "--out-dir", s(&rec), "--dataset", s(&ds)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(rec.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 3);

    let csv = dir.path().join("eval.csv");
    let target = format!("target={}", s(&rec.join("target.f32")));
    run(&["eval", "--dataset", s(&ds), "--reconstructed", &target, "--container", s(&nlz), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "field,psnr,mse,max_abs_error,abs,olr_percent,bit_rate");
    let cols: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(cols[0], "target");

    // eval agrees with what compress recorded
    let m = manifest(&nlz);
    let r = m["reports"].as_array().unwrap().iter().find(|r| r["name"] == "target").unwrap();
    let psnr: f64 = cols[1].parse().unwrap();
    assert!((psnr - r["psnr_final"].as_f64().unwrap()).abs() < 1e-9);
    let max_err: f64 = cols[3].parse().unwrap();
    let abs: f64 = cols[4].parse().unwrap();
    assert!(max_err <= abs);
    let bit_rate: f64 = cols[6].parse().unwrap();
    assert!((bit_rate - r["bit_rate"].as_f64().unwrap()).abs() < 1e-6);
}

#[test]
fn field_inputs_without_dims_are_rejected() {
    let (dir, ds) = dataset(2);
    let raw = ds.parent().unwrap().join("target.f32");
    let out = bin()
        .args(["compress", "--field", &format!("t={}", s(&raw)), "-o", s(&dir.path().join("x.nlz"))])
        .env_remove("RUST_BACKTRACE")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dims"));
}

#[test]
fn regulated_mode_stores_no_coordinates() {
    let (dir, ds) = dataset(3);
    let nlz = dir.path().join("reg.nlz");
    compress(&ds, &nlz, &["--mode", "regulated"]);
    let m = manifest(&nlz);
    for r in m["reports"].as_array().unwrap() {
        assert_eq!(r["coords_bits"], 0, "{r}");
    }
}

#[test]
fn rdcurve_emits_baseline_and_enhanced_rows() {
    let (dir, ds) = dataset(4);
    let csv = dir.path().join("rd.csv");
    run(&["rdcurve", "--dataset", s(&ds), "--target", "target", "--bounds", "1e-2,1e-3", "--epochs", "2", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("label,rel_bound,bit_rate,psnr"));
    let labels: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["baseline", "cross_field", "baseline", "cross_field"]);
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let (dir, ds) = dataset(5);
    let a = dir.path().join("a.nlz");
    compress(&ds, &a, &["--seed", "7"]);
    let b = dir.path().join("b.nlz");
    run(&["--deterministic", "compress", "--from-manifest", s(&a.with_extension("manifest.json")), "-o", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn changed_inputs_fail_manifest_verification() {
    let (dir, ds) = dataset(6);
    let a = dir.path().join("a.nlz");
    compress(&ds, &a, &[]);
    let raw = ds.parent().unwrap().join("aux0.f32");
    let mut bytes = std::fs::read(&raw).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&raw, bytes).unwrap();
    let out = bin()
        .args(["compress", "--from-manifest", s(&a.with_extension("manifest.json")), "-o", s(&dir.path().join("b.nlz"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}

fn read_matrix(path: &Path) -> Vec<Vec<u8>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn conflict_matrices_match_golden_and_are_symmetric() {
    let (dir, ds) = dataset(1);
    let nlz = dir.path().join("c.nlz");
    compress(&ds, &nlz, &["--seed", "3"]);
    let prefix = dir.path().join("cf");
    let out = run(&["analyze", "conflicts", s(&nlz), "--dataset", s(&ds), "--target", "target", "--out-prefix", s(&prefix)]);
    let stdout = String::from_utf8_lossy(&out.stdout);

    // sample conflicts depend only on the baseline codec, so they are pinned
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/conflicts_samples.csv");
    let produced = std::fs::read_to_string(dir.path().join("cf_samples.csv")).unwrap();
    assert_eq!(produced, std::fs::read_to_string(golden).unwrap());

    for tag in ["samples", "gradients"] {
        let m = read_matrix(&dir.path().join(format!("cf_{tag}.csv")));
        assert_eq!(m.len(), 16);
        let mut pairs = 0;
        for i in 0..16 {
            assert_eq!(m[i][i], 0);
            for j in 0..16 {
                assert_eq!(m[i][j], m[j][i]);
                pairs += usize::from(i < j && m[i][j] == 1);
            }
        }
        assert!(stdout.contains(&format!("{tag}: {pairs} conflicting pairs")), "{stdout}");
        let pgm = std::fs::read(dir.path().join(format!("cf_{tag}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    }
}

#[test]
fn ig_attributions_are_complete() {
    let (dir, ds) = dataset(2);
    let nlz = dir.path().join("ig.nlz");
    compress(&ds, &nlz, &[]);
    let prefix = dir.path().join("ig");
    let out = run(&["analyze", "ig", s(&nlz), "--target", "target", "--slice", "3", "--y", "5", "--x", "9", "--out-prefix", s(&prefix)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with("completeness gap")).unwrap();
    let pct: f64 = line.split('(').nth(1).unwrap().split('%').next().unwrap().parse().unwrap();
    // left Riemann sums are first order; a few percent is the usual sanity bar
    assert!(pct < 5.0, "{line}");
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    // three channels of a 16×16 slice plus the header
    assert_eq!(csv.lines().count(), 3 * 256 + 1);
    for k in 0..3 {
        assert!(dir.path().join(format!("ig_c{k}.pgm")).exists());
    }
}

#[test]
fn slice_pgm_writes_an_image() {
    let (dir, ds) = dataset(1);
    let pgm = dir.path().join("s.pgm");
    let raw = ds.parent().unwrap().join("target.f32");
    run(&["slice-pgm", s(&raw), "--dims", "16", "16", "16", "--axis", "2", "--index", "4", "--out", s(&pgm)]);
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(bytes.len(), "P5\n16 16\n255\n".len() + 256);
}

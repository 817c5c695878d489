use fieldcodec::container::{read_container, write_container, Container};
use fieldcodec::field::{gen_synthetic, Dims, FieldSet, SynthSpec};
use fieldcodec::net::train::TrainConfig;
use fieldcodec::outlier::BoundMode;
use fieldcodec::pipeline::{compress, reconstruct, PipelineConfig};

fn small_set(seed: u64) -> FieldSet {
    gen_synthetic(&SynthSpec { dims: Dims::new(16, 16, 16), ..Default::default() }, seed).unwrap()
}

fn config(mode: BoundMode, epochs: usize) -> PipelineConfig {
    PipelineConfig {
        mode,
        train: TrainConfig { epochs, ..Default::default() },
        targets: Some(vec!["target".into()]),
        ..Default::default()
    }
}

/// Largest error over every field, in units of that field's bound.
fn worst_ratio(set: &FieldSet, c: &Container) -> f64 {
    let bytes = write_container(c).unwrap();
    let rec = reconstruct(&read_container(&bytes).unwrap(), None).unwrap();
    let mut worst = 0.0f64;
    for f in set.fields() {
        let abs = c.records_for(&f.name).next().unwrap().abs;
        let out = rec.fields.get(&f.name).unwrap();
        for (x, y) in f.values().iter().zip(out.values()) {
            worst = worst.max((x - y).abs() / abs);
        }
    }
    worst
}

#[test]
fn strict_mode_respects_the_bound() {
    for seed in [1, 2] {
        let set = small_set(seed);
        for rel in [1e-2, 1e-3] {
            let out = compress(&set, &PipelineConfig { rel, ..config(BoundMode::Strict, 4) }).unwrap();
            assert!(worst_ratio(&set, &out.container) <= 1.0);
        }
    }
}

#[test]
fn regulated_mode_stays_within_twice_the_bound_even_untrained() {
    let set = small_set(3);
    for epochs in [0, 4] {
        let out = compress(&set, &config(BoundMode::Regulated, epochs)).unwrap();
        assert!(worst_ratio(&set, &out.container) <= 2.0);
        assert!(out.reports.iter().all(|r| r.coords_bits == 0));
    }
}

#[test]
fn stripping_outliers_leaves_the_regulated_guarantee() {
    let set = small_set(4);
    let mut c = compress(&set, &config(BoundMode::Strict, 4)).unwrap().container;
    for r in &mut c.records {
        r.outliers = None;
    }
    c.mode = BoundMode::Regulated;
    assert!(worst_ratio(&set, &c) <= 2.0);
}

#[test]
fn reconstruction_reproduces_compression_time_quality() {
    let set = small_set(5);
    let out = compress(&set, &PipelineConfig { block_size: Some(8), ..config(BoundMode::Strict, 3) }).unwrap();
    let bytes = write_container(&out.container).unwrap();
    let rec = reconstruct(&read_container(&bytes).unwrap(), Some(&set)).unwrap();
    for (a, b) in out.reports.iter().zip(&rec.reports) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.psnr_final, b.psnr_final);
        assert_eq!(a.outliers, b.outliers);
    }
    assert!(worst_ratio(&set, &out.container) <= 1.0);
}

//! Adapter for external compressor binaries (SZ3, ZFP, ...).
//!
//! A tool is described by two command templates, one per direction. Each is
//! split on whitespace and the placeholders `{in}`, `{out}`, `{d0}`, `{d1}`,
//! `{d2}`, `{abs}` and `{prec}` are substituted per token. The decompressed
//! output must be a headerless little-endian raw file in row-major order.
//!
//! SZ3, for instance:
//!
//! ```text
//! compress:   sz3 -f -i {in} -z {out} -3 {d2} {d1} {d0} -M ABS {abs}
//! decompress: sz3 -f -z {in} -o {out} -3 {d2} {d1} {d0} -M ABS {abs}
//! ```

use std::io::ErrorKind;
use std::path::Path;
use std::process::Command;

use super::{CodecError, ErrorBound};
use crate::field::{from_raw_bytes, Order, Precision, ScalarField};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalTool {
    pub compress: String,
    pub decompress: String,
}

impl ExternalTool {
    /// A tool that copies bytes through unchanged; useful for testing.
    pub fn copy_through() -> Self {
        ExternalTool { compress: "cp {in} {out}".into(), decompress: "cp {in} {out}".into() }
    }
}

fn expand(template: &str, input: &Path, output: &Path, field: &ScalarField, abs: f64) -> Vec<String> {
    let prec = match field.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    template
        .split_whitespace()
        .map(|tok| {
            tok.replace("{in}", &input.to_string_lossy())
                .replace("{out}", &output.to_string_lossy())
                .replace("{d0}", &field.dims[0].to_string())
                .replace("{d1}", &field.dims[1].to_string())
                .replace("{d2}", &field.dims[2].to_string())
                .replace("{abs}", &format!("{abs:e}"))
                .replace("{prec}", prec)
        })
        .collect()
}

fn run(argv: &[String]) -> Result<(), CodecError> {
    let (program, args) =
        argv.split_first().ok_or_else(|| CodecError::BadTemplate("empty command".into()))?;
    let output = Command::new(program).args(args).output().map_err(|e| match e.kind() {
        ErrorKind::NotFound => CodecError::ToolMissing(program.clone()),
        _ => CodecError::Io(e),
    })?;
    if !output.status.success() {
        return Err(CodecError::ToolFailed {
            program: program.clone(),
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    Ok(())
}

/// Compresses and decompresses `field` with an external tool, returning
/// the compressed bytes and the decompressed field after checking the bound.
pub fn external_compress(
    tool: &ExternalTool,
    field: &ScalarField,
    bound: &ErrorBound,
) -> Result<(Vec<u8>, ScalarField), CodecError> {
    for t in [&tool.compress, &tool.decompress] {
        if !(t.contains("{in}") && t.contains("{out}")) {
            return Err(CodecError::BadTemplate(format!("`{t}` lacks {{in}} or {{out}}")));
        }
    }
    let dir = tempfile::tempdir()?;
    let raw_in = dir.path().join("input.raw");
    let packed = dir.path().join("packed.bin");
    let raw_out = dir.path().join("output.raw");
    field.store_raw(&raw_in)?;

    run(&expand(&tool.compress, &raw_in, &packed, field, bound.abs))?;
    let payload = std::fs::read(&packed)?;
    run(&expand(&tool.decompress, &packed, &raw_out, field, bound.abs))?;
    let bytes = std::fs::read(&raw_out)?;
    let decompressed = from_raw_bytes(&bytes, field.name.clone(), field.dims, field.precision, Order::Row)?;

    for (index, (a, b)) in field.values().iter().zip(decompressed.values()).enumerate() {
        let error = (a - b).abs();
        if error > bound.abs {
            return Err(CodecError::BoundViolated { index, error, abs: bound.abs });
        }
    }
    Ok((payload, decompressed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::abs_bound;
    use crate::field::Dims;

    fn sample() -> ScalarField {
        let dims = Dims::new(3, 4, 5);
        ScalarField::new("s", dims, Precision::F32, (0..60).map(|i| 100.0 + i as f64 * 0.5).collect()).unwrap()
    }

    #[test]
    fn copy_through_stub_is_lossless() {
        let f = sample();
        let bound = abs_bound(1e-3, &f).unwrap();
        let (payload, dec) = external_compress(&ExternalTool::copy_through(), &f, &bound).unwrap();
        assert_eq!(payload.len(), 60 * 4);
        assert_eq!(dec, f);
    }

    #[test]
    fn missing_binary() {
        let tool = ExternalTool {
            compress: "definitely-not-a-real-compressor-xyz {in} {out}".into(),
            decompress: "cp {in} {out}".into(),
        };
        let f = sample();
        let err = external_compress(&tool, &f, &abs_bound(1e-3, &f).unwrap()).unwrap_err();
        assert!(matches!(err, CodecError::ToolMissing(_)));
    }

    #[test]
    fn failing_tool() {
        let tool = ExternalTool { compress: "false {in} {out}".into(), decompress: "cp {in} {out}".into() };
        let f = sample();
        let err = external_compress(&tool, &f, &abs_bound(1e-3, &f).unwrap()).unwrap_err();
        assert!(matches!(err, CodecError::ToolFailed { .. }));
    }

    #[test]
    fn lossy_stub_violating_bound_is_flagged() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("zero_first.sh");
        // Replaces the first f32 value with 0.0 on the way back.
        std::fs::write(&script, "#!/bin/sh\nhead -c 4 /dev/zero > \"$2\"\ntail -c +5 \"$1\" >> \"$2\"\n").unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        let tool = ExternalTool {
            compress: "cp {in} {out}".into(),
            decompress: format!("{} {{in}} {{out}}", script.display()),
        };
        let f = sample();
        let err = external_compress(&tool, &f, &abs_bound(1e-3, &f).unwrap()).unwrap_err();
        assert!(matches!(err, CodecError::BoundViolated { index: 0, .. }), "{err:?}");
    }

    #[test]
    fn template_substitution() {
        let f = sample();
        let argv = expand("x -i {in} -3 {d2} {d1} {d0} -M ABS {abs} {prec}", Path::new("/a"), Path::new("/b"), &f, 0.5);
        assert_eq!(argv, vec!["x", "-i", "/a", "-3", "5", "4", "3", "-M", "ABS", "5e-1", "f32"]);
    }

    #[test]
    fn sz3_if_installed() {
        let probe = Command::new("sz3").arg("--help").output();
        if probe.is_err() {
            eprintln!("sz3 not installed; skipping");
            return;
        }
        let spec = crate::field::SynthSpec::default();
        let f = crate::field::gen_synthetic(&spec, 1).unwrap().fields()[0].clone();
        let tool = ExternalTool {
            compress: "sz3 -f -i {in} -z {out} -3 {d2} {d1} {d0} -M ABS {abs}".into(),
            decompress: "sz3 -f -z {in} -o {out} -3 {d2} {d1} {d0} -M ABS {abs}".into(),
        };
        let bound = abs_bound(1e-3, &f).unwrap();
        let (_, dec) = external_compress(&tool, &f, &bound).unwrap();
        assert_eq!(dec.dims, f.dims);
    }
}

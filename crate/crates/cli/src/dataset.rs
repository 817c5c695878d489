//! Locating raw field files on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fieldcodec::field::{load_raw, Dims, FieldSet, Order, Precision, SynthSpec};

/// Sidecar describing a directory of raw fields, as written by `gen-synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub dims: Dims,
    pub precision: Precision,
    pub order: Order,
    /// Paths are relative to the sidecar's directory.
    pub fields: Vec<FieldEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOrigin {
    pub spec: SynthSpec,
    pub seed: u64,
}

/// Fields to load, with resolved absolute paths.
#[derive(Debug, Clone)]
pub struct FieldSource {
    pub dims: Dims,
    pub precision: Precision,
    pub order: Order,
    pub fields: Vec<(String, PathBuf)>,
}

impl FieldSource {
    pub fn from_dataset(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ds: DatasetFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(FieldSource {
            dims: ds.dims,
            precision: ds.precision,
            order: ds.order,
            fields: ds.fields.into_iter().map(|f| (f.name, base.join(f.path))).collect(),
        })
    }

    /// Builds a source from `name=path` pairs.
    pub fn from_pairs(pairs: &[String], dims: Dims, precision: Precision, order: Order) -> Result<Self> {
        let fields = pairs.iter().map(|p| parse_pair(p)).collect::<Result<Vec<_>>>()?;
        if fields.is_empty() {
            bail!("no input fields given");
        }
        Ok(FieldSource { dims, precision, order, fields })
    }

    pub fn load(&self) -> Result<FieldSet> {
        let fields = self
            .fields
            .iter()
            .map(|(name, path)| {
                load_raw(path, name.clone(), self.dims, self.precision, self.order)
                    .with_context(|| format!("loading field `{name}` from {}", path.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FieldSet::new(fields)?)
    }
}

/// Splits `name=path`. A bare path uses its file stem as the name.
pub fn parse_pair(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => bail!("expected NAME=PATH, got `{s}`"),
        None => {
            let path = PathBuf::from(s);
            let name = path
                .file_stem()
                .and_then(|n| n.to_str())
                .with_context(|| format!("cannot derive a field name from `{s}`"))?
                .to_string();
            Ok((name, path))
        }
    }
}

pub fn extension(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs() {
        assert_eq!(parse_pair("t=/a/b.f32").unwrap(), ("t".into(), PathBuf::from("/a/b.f32")));
        assert_eq!(parse_pair("/a/temp.f32").unwrap().0, "temp");
        assert!(parse_pair("=x").is_err());
    }
}

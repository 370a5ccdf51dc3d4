//! Named parameter collections persisted as a text manifest of
//! `name path` lines pointing at TNSR files.
//!
//! Relative paths resolve against the manifest's directory. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::tnsr;
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Stores `<prefix>.weight`, `<prefix>.bias` and `<prefix>.dilation`.
    pub fn insert_conv(&mut self, prefix: &str, spec: &ConvSpec) {
        self.insert(format!("{prefix}.weight"), spec.weights().clone());
        self.insert(format!("{prefix}.bias"), spec.bias().clone());
        self.insert(
            format!("{prefix}.dilation"),
            Tensor::scalar(spec.dilation() as f64),
        );
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvSpec> {
        let d = self.get(&format!("{prefix}.dilation"))?.data()[0];
        if d < 1.0 || d.fract() != 0.0 {
            return Err(Error::invalid("param_store", format!("{prefix}.dilation = {d}")));
        }
        ConvSpec::new(
            self.get(&format!("{prefix}.weight"))?.clone(),
            self.get(&format!("{prefix}.bias"))?.clone(),
            d as usize,
        )
    }

    /// Writes one TNSR file per tensor into `dir` plus `dir/params.manifest`,
    /// returning the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.tnsr");
            tnsr::write_tensor(dir.join(&file), t)?;
            manifest.push_str(&format!("{name} {file}\n"));
        }
        let path = dir.join("params.manifest");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut store = ParamStore::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(path), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::invalid(
                    "manifest",
                    format!("{}:{}: expected `name path`", manifest.display(), lineno + 1),
                ));
            };
            let path = base.join(path);
            let t = tnsr::read_tensor(&path).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", path.display()),
                },
                e => e,
            })?;
            store.insert(name, t);
        }
        Ok(store)
    }
}

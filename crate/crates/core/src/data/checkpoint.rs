//! Checkpoint directories: `manifest.json` (structured text) plus
//! `params.bin`, the parameters as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Config;
use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::tensor::Matrix;
use crate::train::LossRecord;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub config: Config,
    pub grid: Option<GridSpec>,
    pub metric_history: Vec<LossRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Matrix>,
}

impl Checkpoint {
    pub fn new(config: Config, grid: Option<GridSpec>, named: Vec<(String, Matrix)>, history: Vec<LossRecord>) -> Self {
        let entries = named
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                dtype: "f32-le".into(),
                tensors: entries,
                config,
                grid,
                metric_history: history,
            },
            tensors: named.into_iter().map(|(_, m)| m).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest + "\n").map_err(|e| Error::io(&mpath, e))?;
        let total: usize = self.tensors.iter().map(Matrix::len).sum();
        let mut payload = Vec::with_capacity(total * 4);
        for m in &self.tensors {
            for &v in m.as_slice() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let ppath = dir.join(PAYLOAD_FILE);
        fs::write(&ppath, payload).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unknown format version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.dtype != "f32-le" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let ppath = dir.join(PAYLOAD_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected: usize = manifest.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
        if bytes.len() != expected * 4 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes but the manifest describes {} f32 values",
                bytes.len(),
                expected
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let tensors = manifest
            .tensors
            .iter()
            .map(|e| {
                let data: Vec<f64> = values.by_ref().take(e.shape[0] * e.shape[1]).collect();
                Matrix::from_vec(e.shape[0], e.shape[1], data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, tensors })
    }

    /// Returns tensors in the order of `expected`, failing on any missing,
    /// extra or mis-shaped entry. Names in `optional` may be absent.
    pub fn reconcile(&self, expected: &[(String, (usize, usize))], optional: &[&str]) -> Result<Vec<Option<Matrix>>> {
        for e in &self.manifest.tensors {
            if !expected.iter().any(|(n, _)| *n == e.name) {
                return Err(Error::Checkpoint(format!(
                    "unexpected parameter `{}` in manifest",
                    e.name
                )));
            }
        }
        expected
            .iter()
            .map(|(name, shape)| match self.get(name) {
                Some(m) if m.shape() == *shape => Ok(Some(m.clone())),
                Some(m) => Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {shape:?}",
                    m.shape()
                ))),
                None if optional.contains(&name.as_str()) => Ok(None),
                None => Err(Error::Checkpoint(format!("parameter `{name}` missing from manifest"))),
            })
            .collect()
    }
}

//! Model bundles: a tar archive holding `manifest.json`, one little-endian
//! float32 file per array under `arrays/`, and `SHA256SUMS` covering all of them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::error::ModelError;
use crate::model::{ModelSpec, Models};
use crate::nn::{AdamConfig, ParamStore};

pub const BUNDLE_FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const SUMS: &str = "SHA256SUMS";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bundle integrity check failed: {0}")]
    Integrity(String),
    #[error("malformed bundle: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub spec: ModelSpec,
    pub class_names: Vec<String>,
    /// Full-resolution (height, width) the model was trained at.
    pub resolution: (usize, usize),
    pub config_hash: Option<String>,
    /// Index of the phase in progress and epochs completed within it.
    pub phase: usize,
    pub epoch: usize,
    pub step: u64,
    pub adam: AdamConfig,
    pub metrics: BTreeMap<String, f64>,
    pub arrays: Vec<ArrayEntry>,
}

/// Parameters (and optionally optimizer state) with their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    /// `adam/...` arrays; empty for inference-only bundles.
    pub optimizer: ParamStore<f32>,
}

fn array_path(name: &str) -> String {
    format!("arrays/{name}.f32")
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, data)
}

impl ModelBundle {
    pub fn new(manifest: Manifest, params: ParamStore<f32>, optimizer: ParamStore<f32>) -> Self {
        let mut b = Self { manifest, params, optimizer };
        b.refresh_entries();
        b
    }

    fn refresh_entries(&mut self) {
        self.manifest.arrays = self
            .params
            .iter()
            .chain(self.optimizer.iter())
            .map(|(n, a)| ArrayEntry { name: n.to_string(), shape: a.shape().to_vec() })
            .collect();
    }

    pub fn models(&self) -> Result<Models, ModelError> {
        Models::build(&self.manifest.spec)
    }

    /// Serialized archive bytes; equal bundles give equal bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>, BundleError> {
        let mut manifest = self.manifest.clone();
        manifest.arrays = self
            .params
            .iter()
            .chain(self.optimizer.iter())
            .map(|(n, a)| ArrayEntry { name: n.to_string(), shape: a.shape().to_vec() })
            .collect();
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        files.push((MANIFEST.into(), serde_json::to_vec_pretty(&manifest).map_err(|e| BundleError::Format(e.to_string()))?));
        for (name, a) in self.params.iter().chain(self.optimizer.iter()) {
            let mut bytes = Vec::with_capacity(a.len() * 4);
            for v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            files.push((array_path(name), bytes));
        }
        let sums: String = files.iter().map(|(p, d)| format!("{}  {}\n", hex::encode(Sha256::digest(d)), p)).collect();
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        append(&mut builder, SUMS, sums.as_bytes())?;
        for (p, d) in &files {
            append(&mut builder, p, d)?;
        }
        Ok(builder.into_inner()?)
    }

    /// Parse and verify an archive. Nothing is returned unless every checksum matches.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BundleError> {
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut archive = tar::Archive::new(Cursor::new(bytes));
        let entries = archive.entries().map_err(|e| BundleError::Integrity(format!("unreadable archive: {e}")))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| BundleError::Integrity(format!("unreadable entry: {e}")))?;
            let path = entry.path().map_err(|e| BundleError::Integrity(e.to_string()))?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data).map_err(|e| BundleError::Integrity(format!("{path}: {e}")))?;
            files.insert(path, data);
        }
        let sums = files.get(SUMS).ok_or_else(|| BundleError::Integrity(format!("missing {SUMS}")))?;
        let sums = std::str::from_utf8(sums).map_err(|_| BundleError::Integrity(format!("{SUMS} is not text")))?;
        let mut listed = 0;
        for line in sums.lines() {
            let (digest, path) = line.split_once("  ").ok_or_else(|| BundleError::Integrity(format!("bad {SUMS} line `{line}`")))?;
            let data = files.get(path).ok_or_else(|| BundleError::Integrity(format!("missing {path}")))?;
            if hex::encode(Sha256::digest(data)) != digest {
                return Err(BundleError::Integrity(format!("checksum mismatch for {path}")));
            }
            listed += 1;
        }
        if listed + 1 != files.len() {
            return Err(BundleError::Integrity("archive holds files not covered by checksums".into()));
        }
        let manifest: Manifest = serde_json::from_slice(files.get(MANIFEST).ok_or_else(|| BundleError::Format("missing manifest".into()))?)
            .map_err(|e| BundleError::Format(format!("manifest: {e}")))?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(BundleError::Format(format!("unsupported bundle format {}", manifest.format)));
        }
        let mut params = ParamStore::new();
        let mut optimizer = ParamStore::new();
        for entry in &manifest.arrays {
            let data = files.get(&array_path(&entry.name)).ok_or_else(|| BundleError::Format(format!("missing array {}", entry.name)))?;
            let n: usize = entry.shape.iter().product();
            if data.len() != 4 * n {
                return Err(BundleError::Format(format!("array {} holds {} bytes for shape {:?}", entry.name, data.len(), entry.shape)));
            }
            let values: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let a = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| BundleError::Format(e.to_string()))?;
            if entry.name.starts_with("adam/") {
                optimizer.insert(entry.name.clone(), a);
            } else {
                params.insert(entry.name.clone(), a);
            }
        }
        let bundle = Self { manifest, params, optimizer };
        bundle.models()?.check_params(&bundle.params)?;
        Ok(bundle)
    }

    /// Atomic write: temporary file then rename.
    pub fn save(&self, path: &Path) -> Result<(), BundleError> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BundleError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require the parameters to fit `expected`; the error names the
    /// first parameter (in network order) whose shape differs.
    pub fn load_for(path: &Path, expected: &ModelSpec) -> Result<Self, BundleError> {
        let bundle = Self::load(path)?;
        Models::build(expected)?.check_params(&bundle.params)?;
        Ok(bundle)
    }

    /// Copy without optimizer state.
    pub fn inference_only(&self) -> Self {
        Self::new(self.manifest.clone(), self.params.clone(), ParamStore::new())
    }
}

//! Run manifests and the single writer that owns every output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedgame_core::LabeledDataset;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::formats::encode_fgds;

pub const MANIFEST_FORMAT: &str = "fedgame-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// SHA-256 of the dataset's FGDS encoding.
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(name: impl Into<String>, ds: &LabeledDataset) -> Self {
        DatasetFingerprint {
            name: name.into(),
            samples: ds.len(),
            dim: ds.dim(),
            classes: ds.classes(),
            sha256: sha256_hex(&encode_fgds(ds)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    /// Subcommand and plan, e.g. `["experiment", "noniid_sweep"]`.
    pub command: Vec<String>,
    /// Fully resolved configuration (CLI flags and environment folded in).
    pub config_toml: String,
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetFingerprint>,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
    /// Wall-clock seconds per phase. Kept out of every other output.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::format(path, e.to_string()))
    }

    /// Checks that every listed file exists under `root` with the recorded
    /// size and hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for f in &self.files {
            let path = root.join(&f.path);
            let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            if bytes.len() as u64 != f.bytes {
                return Err(HarnessError::format(
                    &path,
                    format!("size {} differs from recorded {}", bytes.len(), f.bytes),
                ));
            }
            let h = sha256_hex(&bytes);
            if h != f.sha256 {
                return Err(HarnessError::format(
                    &path,
                    format!("sha256 {h} differs from recorded {}", f.sha256),
                ));
            }
        }
        Ok(())
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("fedgame".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        (
            "fedgame-core".to_string(),
            fedgame_core::VERSION.to_string(),
        ),
        (
            "trace_format".to_string(),
            crate::formats::TRACE_VERSION_LINE
                .trim_start_matches("# ")
                .to_string(),
        ),
    ])
}

/// Writes files below one root and records them for the manifest.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl ArtifactWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        Ok(ArtifactWriter {
            root,
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        self.files.retain(|f| f.path != rel);
        self.files.push(FileEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(
        self,
        command: Vec<String>,
        config_toml: String,
        seeds: Vec<u64>,
        datasets: Vec<DatasetFingerprint>,
        timings: BTreeMap<String, f64>,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            command,
            config_toml,
            seeds,
            datasets,
            versions: versions(),
            files: self.files,
            timings,
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| HarnessError::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        Ok(manifest)
    }
}

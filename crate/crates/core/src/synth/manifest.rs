use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Paths are relative to the manifest's directory unless absolute.
    pub degraded: String,
    pub clean: String,
    pub label: usize,
    pub mse: f64,
}

/// One curation (or generation) step, with the parameters needed to replay it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationStep {
    pub op: String,
    pub seed: Option<u64>,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub records: Vec<ManifestRecord>,
    pub curation_log: Vec<CurationStep>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            records: Vec::new(),
            curation_log: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Self {
        DatasetManifest {
            records,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per label, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        let mut counts = vec![0; n];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn log(&mut self, op: &str, seed: Option<u64>, params: serde_json::Value) {
        self.curation_log.push(CurationStep {
            op: op.to_owned(),
            seed,
            params,
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: m.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Check labels against `num_classes` and, when `root` is given, that
    /// every referenced file exists.
    pub fn validate(&self, num_classes: usize, root: Option<&Path>) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= num_classes {
                return Err(Error::Dataset(format!(
                    "record {i} has label {} outside 0..{num_classes}",
                    r.label
                )));
            }
            if let Some(root) = root {
                for p in [&r.degraded, &r.clean] {
                    let full = resolve(root, p);
                    if !full.is_file() {
                        return Err(Error::Dataset(format!("record {i}: missing file {}", full.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

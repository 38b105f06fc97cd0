//! JSON Lines dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Where a record's label came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Manual,
    Coarse,
    Auto,
    Enhanced,
    Flagged,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Provenance::Manual => "manual",
            Provenance::Coarse => "coarse",
            Provenance::Auto => "auto",
            Provenance::Enhanced => "enhanced",
            Provenance::Flagged => "flagged",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    /// Fields this crate does not interpret; written back unchanged.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestRecord {
    pub fn new(image_path: impl Into<PathBuf>, label_path: Option<PathBuf>, split: Split, provenance: Provenance) -> Self {
        Self {
            image_path: image_path.into(),
            label_path,
            split,
            provenance,
            quality: None,
            extra: BTreeMap::new(),
        }
    }

    /// Stem of the image file, used to name derived outputs.
    pub fn name(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.to_string_lossy().into_owned())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let m = Self { records };
        m.validate().map_err(|(i, message)| Error::Manifest {
            path: PathBuf::new(),
            line: i + 1,
            message,
        })?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `Err((index, message))` for the first invalid record.
    fn validate(&self) -> std::result::Result<(), (usize, String)> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            check_record(r).map_err(|m| (i, m))?;
            if !seen.insert(&r.image_path) {
                return Err((i, format!("duplicate image_path {}", r.image_path.display())));
            }
        }
        Ok(())
    }

    /// Paths relative to `base` become absolute-ish (`base.join(p)`).
    pub fn resolve(&self, base: &Path) -> Self {
        let fix = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        Self {
            records: self
                .records
                .iter()
                .map(|r| ManifestRecord {
                    image_path: fix(&r.image_path),
                    label_path: r.label_path.as_deref().map(fix),
                    ..r.clone()
                })
                .collect(),
        }
    }
}

fn check_record(r: &ManifestRecord) -> std::result::Result<(), String> {
    if r.image_path.as_os_str().is_empty() {
        return Err("image_path is empty".into());
    }
    if let Some(q) = r.quality {
        if !(0.0..=1.0).contains(&q) {
            return Err(format!("quality {q} outside [0, 1]"));
        }
    }
    Ok(())
}

/// Blank lines are skipped. Paths are returned as written; see
/// [`DatasetManifest::resolve`].
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?;
        records.push(rec);
        lines_of.push(i + 1);
    }
    let m = DatasetManifest { records };
    m.validate().map_err(|(i, message)| err(lines_of[i], message))?;
    Ok(m)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &m.records {
        let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

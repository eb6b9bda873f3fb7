//! JSON-lines dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio_path: String,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.id.is_empty() {
                return Err(Error::invalid("manifest record with an empty id"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest id `{}`", r.id)));
            }
        }
        Ok(Self { root: root.into(), records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        crate::format::write_atomic(path, &out)
    }

    pub fn audio_path(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.audio_path);
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"id\":\"a\",\"audio_path\":\"a.wav\",\"tags\":[\"x\"],\"label\":1,\"split\":\"train\"}\n\n{\"id\":\"b\",\"audio_path\":\"/abs/b.wav\",\"tags\":[]}\n",
        )
        .unwrap();
        let m = Manifest::read(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.audio_path(&m.records[0]), dir.path().join("a.wav"));
        assert_eq!(m.audio_path(&m.records[1]), PathBuf::from("/abs/b.wav"));
        assert_eq!(m.records[0].label, Some(1));

        let copy = dir.path().join("c.jsonl");
        m.write(&copy).unwrap();
        assert_eq!(Manifest::read(&copy).unwrap().records, m.records);

        fs::write(&path, "{\"id\":\"a\",\"audio_path\":\"a\"}\n{\"id\":\"a\",\"audio_path\":\"b\"}\n").unwrap();
        assert!(Manifest::read(&path).is_err());
        fs::write(&path, "{\"id\":\"a\",\"audio_path\":\"a\",\"colour\":3}\n").unwrap();
        assert!(Manifest::read(&path).is_err());
    }
}

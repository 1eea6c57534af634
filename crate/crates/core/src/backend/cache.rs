use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendIdentity, ChoiceProbe};
use crate::prompting::Phrasing;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt cache line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProbeKey {
    pub question_id: String,
    pub phrasing: Phrasing,
    pub backend: BackendIdentity,
}

/// Append-only store of probes, one JSON record per line. Each append is
/// flushed and synced before returning; at most one record per key.
#[derive(Debug, Default)]
pub struct ProbeCache {
    path: Option<PathBuf>,
    file: Option<File>,
    records: Vec<ChoiceProbe>,
    index: HashMap<ProbeKey, usize>,
}

impl ProbeCache {
    pub fn in_memory() -> Self {
        ProbeCache::default()
    }

    /// Opens (creating if needed) a cache file. A final line without a
    /// trailing newline is an interrupted write and is truncated away; any
    /// other unparseable line is an error naming its line number.
    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let io = |source| CacheError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io)?;

        let mut cache = ProbeCache {
            path: Some(path.to_path_buf()),
            ..Default::default()
        };
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let complete = line.ends_with('\n');
            let body = line.trim_end();
            if body.is_empty() {
                offset += line.len();
                continue;
            }
            if !complete {
                file.set_len(offset as u64).map_err(io)?;
                file.seek(SeekFrom::End(0)).map_err(io)?;
                break;
            }
            let probe =
                serde_json::from_str::<ChoiceProbe>(body).map_err(|e| CacheError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            cache.insert(probe);
            offset += line.len();
        }
        cache.file = Some(file);
        Ok(cache)
    }

    fn insert(&mut self, probe: ChoiceProbe) -> bool {
        let key = probe.key();
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key, self.records.len());
        self.records.push(probe);
        true
    }

    /// Adds a record unless its key is present. Returns whether it was added.
    pub fn append(&mut self, probe: ChoiceProbe) -> Result<bool, CacheError> {
        if self.index.contains_key(&probe.key()) {
            return Ok(false);
        }
        if let (Some(file), Some(path)) = (self.file.as_mut(), self.path.as_ref()) {
            let io = |source| CacheError::Io {
                path: path.clone(),
                source,
            };
            let mut line = serde_json::to_string(&probe).expect("probe serializes");
            line.push('\n');
            file.write_all(line.as_bytes()).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        Ok(self.insert(probe))
    }

    pub fn contains(&self, key: &ProbeKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(
        &self,
        question_id: &str,
        phrasing: Phrasing,
        backend: &BackendIdentity,
    ) -> Option<&ChoiceProbe> {
        let key = ProbeKey {
            question_id: question_id.to_string(),
            phrasing,
            backend: backend.clone(),
        };
        self.index.get(&key).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[ChoiceProbe] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }
}

//! Artifact registry: a content store plus an index of typed records.
//!
//! The index is `records.jsonl` next to the `objects/` directory, one
//! canonical record per line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::Digest;
use crate::store::{ContentSource, ContentStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("registry index line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: EncodingError,
    },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Artifact,
    EvidenceBundle,
    Policy,
    EnvDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryRecord {
    pub digest: Digest,
    pub kind: RecordKind,
    /// Object name inside the content store.
    pub bytes_ref: String,
    pub ledger_index: Option<u64>,
    /// Pipeline stage whose evidence the object belongs to, if any.
    pub stage_index: Option<u64>,
}

#[derive(Debug)]
pub struct Registry {
    objects: ContentStore,
    index_path: Option<PathBuf>,
    records: Mutex<Vec<RegistryRecord>>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry {
            objects: ContentStore::in_memory(),
            index_path: None,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let dir = dir.as_ref();
        let objects = ContentStore::open(dir.join("objects"))?;
        let index_path = dir.join("records.jsonl");
        let records = match fs::read(&index_path) {
            Ok(bytes) => parse_records(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Registry {
            objects,
            index_path: Some(index_path),
            records: Mutex::new(records),
        })
    }

    pub fn objects(&self) -> &ContentStore {
        &self.objects
    }

    /// Store `bytes` and index them. Re-storing identical bytes with the same
    /// kind returns the existing record.
    pub fn store(
        &self,
        bytes: &[u8],
        kind: RecordKind,
        ledger_index: Option<u64>,
        stage_index: Option<u64>,
    ) -> Result<RegistryRecord, RegistryError> {
        let digest = self.objects.put(bytes)?;
        let mut records = self.records.lock().expect("registry index poisoned");
        if let Some(r) = records.iter().find(|r| r.digest == digest && r.kind == kind) {
            return Ok(r.clone());
        }
        let rec = RegistryRecord {
            digest,
            kind,
            bytes_ref: digest.to_hex(),
            ledger_index,
            stage_index,
        };
        if let Some(path) = &self.index_path {
            let mut line = canonical::encode(&rec)?.into_vec();
            line.push(b'\n');
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
        }
        records.push(rec.clone());
        Ok(rec)
    }

    pub fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        self.objects.get(digest)
    }

    pub fn records(&self) -> Vec<RegistryRecord> {
        self.records.lock().expect("registry index poisoned").clone()
    }

    pub fn records_for(&self, digest: &Digest) -> Vec<RegistryRecord> {
        self.records().into_iter().filter(|r| r.digest == *digest).collect()
    }
}

impl ContentSource for Registry {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        self.objects.get(digest)
    }

    fn contains(&self, digest: &Digest) -> bool {
        self.objects.has(digest)
    }
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<RegistryRecord>, RegistryError> {
    let mut out = Vec::new();
    for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        out.push(
            canonical::decode_exact(line).map_err(|source| RegistryError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash;

    #[test]
    fn store_fetch_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let r = reg.store(b"artifact", RecordKind::Artifact, Some(3), Some(1)).unwrap();
        assert_eq!(r.digest, hash(b"artifact"));
        assert_eq!(reg.store(b"artifact", RecordKind::Artifact, None, None).unwrap(), r);
        assert_eq!(reg.fetch(&r.digest).unwrap(), b"artifact");

        let again = Registry::open(dir.path()).unwrap();
        assert_eq!(again.records(), vec![r]);
    }

    #[test]
    fn missing_and_corrupt_objects() {
        let reg = Registry::in_memory();
        assert!(matches!(reg.fetch(&hash(b"x")), Err(StoreError::NotFound(_))));
        let r = reg.store(b"abc", RecordKind::Policy, None, None).unwrap();
        reg.objects().corrupt(&r.digest, b"abd").unwrap();
        assert!(matches!(reg.fetch(&r.digest), Err(StoreError::DigestMismatch { .. })));
    }
}

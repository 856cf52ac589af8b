//! Content-addressed byte store keyed by hex digest.
//!
//! Backs both the DBS workspace and the artifact registry. Objects are
//! written once under `<root>/<hex digest>` via a temp file and rename, so
//! readers never observe a partial object; every fetch re-hashes the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use crate::crypto::{hash, Digest};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("object {0} not found")]
    NotFound(Digest),
    #[error("object {expected} is corrupted (hashes to {actual})")]
    DigestMismatch { expected: Digest, actual: Digest },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Anything bytes can be fetched from by digest.
pub trait ContentSource {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError>;

    fn contains(&self, digest: &Digest) -> bool {
        self.fetch(digest).is_ok()
    }
}

#[derive(Debug)]
enum Backend {
    Dir(PathBuf),
    Memory(RwLock<BTreeMap<Digest, Vec<u8>>>),
}

#[derive(Debug)]
pub struct ContentStore {
    backend: Backend,
}

impl ContentStore {
    /// Open (creating if needed) a directory-backed store.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(ContentStore {
            backend: Backend::Dir(dir),
        })
    }

    pub fn in_memory() -> Self {
        ContentStore {
            backend: Backend::Memory(RwLock::new(BTreeMap::new())),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Dir(p) => Some(p),
            Backend::Memory(_) => None,
        }
    }

    /// Path of an object for a directory-backed store.
    pub fn object_path(&self, digest: &Digest) -> Option<PathBuf> {
        self.root().map(|r| r.join(digest.to_hex()))
    }

    /// Store bytes, returning their digest. Idempotent.
    pub fn put(&self, bytes: &[u8]) -> Result<Digest, StoreError> {
        let digest = hash(bytes);
        match &self.backend {
            Backend::Memory(map) => {
                map.write()
                    .expect("store lock poisoned")
                    .entry(digest)
                    .or_insert_with(|| bytes.to_vec());
            }
            Backend::Dir(root) => {
                let path = root.join(digest.to_hex());
                if path.exists() {
                    return Ok(digest);
                }
                let tmp = root.join(format!(".tmp-{}-{}", digest.to_hex(), std::process::id()));
                {
                    let mut f = fs::File::create(&tmp)?;
                    f.write_all(bytes)?;
                    f.sync_all()?;
                }
                fs::rename(&tmp, &path)?;
            }
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        let bytes = match &self.backend {
            Backend::Memory(map) => map
                .read()
                .expect("store lock poisoned")
                .get(digest)
                .cloned()
                .ok_or(StoreError::NotFound(*digest))?,
            Backend::Dir(root) => match fs::read(root.join(digest.to_hex())) {
                Ok(b) => b,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(StoreError::NotFound(*digest))
                }
                Err(e) => return Err(e.into()),
            },
        };
        let actual = hash(&bytes);
        if actual != *digest {
            return Err(StoreError::DigestMismatch {
                expected: *digest,
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn has(&self, digest: &Digest) -> bool {
        match &self.backend {
            Backend::Memory(map) => map.read().expect("store lock poisoned").contains_key(digest),
            Backend::Dir(root) => root.join(digest.to_hex()).is_file(),
        }
    }

    /// All stored digests, sorted.
    pub fn list(&self) -> Result<Vec<Digest>, StoreError> {
        match &self.backend {
            Backend::Memory(map) => Ok(map.read().expect("store lock poisoned").keys().copied().collect()),
            Backend::Dir(root) => {
                let mut out = Vec::new();
                for entry in fs::read_dir(root)? {
                    let name = entry?.file_name();
                    if let Some(d) = name.to_str().and_then(|s| Digest::from_hex(s).ok()) {
                        out.push(d);
                    }
                }
                out.sort();
                Ok(out)
            }
        }
    }

    /// Test hook: overwrite an object's bytes in place without rehashing.
    #[doc(hidden)]
    pub fn corrupt(&self, digest: &Digest, bytes: &[u8]) -> Result<(), StoreError> {
        match &self.backend {
            Backend::Memory(map) => {
                map.write()
                    .expect("store lock poisoned")
                    .insert(*digest, bytes.to_vec());
            }
            Backend::Dir(root) => fs::write(root.join(digest.to_hex()), bytes)?,
        }
        Ok(())
    }
}

impl ContentSource for ContentStore {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        self.get(digest)
    }

    fn contains(&self, digest: &Digest) -> bool {
        self.has(digest)
    }
}

/// Looks in `first`, then `second`.
pub struct Layered<'a, A: ?Sized, B: ?Sized> {
    pub first: &'a A,
    pub second: &'a B,
}

impl<A: ContentSource + ?Sized, B: ContentSource + ?Sized> ContentSource for Layered<'_, A, B> {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        match self.first.fetch(digest) {
            Err(StoreError::NotFound(_)) => self.second.fetch(digest),
            other => other,
        }
    }
}

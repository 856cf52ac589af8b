//! Evidence bundle and run manifest file formats.
//!
//! A bundle is one canonical JSON line per stage, stage 0 first, each holding
//! the stage's actioned evidence and its payload bytes, so an audit needs
//! nothing but the bundle, the ledger and the trust configuration.

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{hash, Digest};
use crate::evidence::ActionedEvidence;
use crate::store::{ContentSource, ContentStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("bundle line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("bundle is empty")]
    Empty,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleStage {
    pub actioned: ActionedEvidence,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    pub stages: Vec<BundleStage>,
}

impl Bundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>, EncodingError> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend_from_slice(canonical::encode(s)?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Strict parse: every line must be canonical and the file must end in
    /// exactly one newline.
    pub fn parse(bytes: &[u8]) -> Result<Bundle, BundleError> {
        let body = bytes.strip_suffix(b"\n").ok_or(BundleError::Malformed {
            line: 0,
            reason: "missing trailing newline".into(),
        })?;
        if body.is_empty() {
            return Err(BundleError::Empty);
        }
        let mut stages = Vec::new();
        for (i, line) in body.split(|b| *b == b'\n').enumerate() {
            let stage = canonical::decode_exact(line).map_err(|e| BundleError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            stages.push(stage);
        }
        Ok(Bundle { stages })
    }

    pub fn final_actioned(&self) -> Option<&ActionedEvidence> {
        self.stages.last().map(|s| &s.actioned)
    }

    /// Bundled payloads as a content source.
    pub fn payloads(&self) -> BundlePayloads {
        let store = ContentStore::in_memory();
        for s in &self.stages {
            // In-memory puts cannot fail.
            let _ = store.put(&s.payload);
        }
        BundlePayloads(store)
    }
}

pub struct BundlePayloads(ContentStore);

impl ContentSource for BundlePayloads {
    fn fetch(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        self.0.get(digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStage {
    pub stage_index: u64,
    pub task_id: String,
    pub payload_digest: Digest,
    pub attested_digest: Digest,
    pub actioned_digest: Option<Digest>,
    pub ledger_index: u64,
}

/// Summary of one run, written next to the bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub pipeline_id: Digest,
    pub policy_id: Digest,
    /// `completed` or `aborted`.
    pub status: String,
    pub aborted_at: Option<u64>,
    pub label: Option<String>,
    pub stages: Vec<ManifestStage>,
    pub artifact_digest: Option<Digest>,
    pub final_commitment_index: Option<u64>,
    pub deploy_record: Option<Digest>,
    pub feedback_index: Option<u64>,
    pub ledger_head: Digest,
    pub bundle_digest: Option<Digest>,
}

impl RunManifest {
    pub fn to_bytes(&self) -> Result<Vec<u8>, EncodingError> {
        let mut v = canonical::encode(self)?.into_vec();
        v.push(b'\n');
        Ok(v)
    }

    pub fn parse(bytes: &[u8]) -> Result<RunManifest, EncodingError> {
        canonical::decode_exact(bytes.strip_suffix(b"\n").unwrap_or(bytes))
    }

    pub fn completed(&self) -> bool {
        self.status == "completed"
    }

    pub fn bundle_matches(&self, bundle_bytes: &[u8]) -> bool {
        self.bundle_digest == Some(hash(bundle_bytes))
    }
}

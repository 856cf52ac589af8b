//! Append-only hash-chained commitment ledger.
//!
//! Each entry carries the digest of its predecessor entry and its own digest
//! over every other field, so rewriting any committed entry breaks the chain
//! at that index. Persisted as one canonical-JSON entry per line.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{digest_of, Digest, Keystore};
use crate::evidence::{auth_problem, AttestedEvidence};

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("ledger file changed underneath this writer (expected {expected} bytes, found {found})")]
    AppendRace { expected: u64, found: u64 },
    #[error("evidence cannot be committed: {0}")]
    InvalidEvidence(String),
    #[error("evidence {0} is already committed")]
    AlreadyCommitted(Digest),
    #[error("no commitment entry matches index {0}")]
    UnknownCommitment(u64),
    #[error("ledger line {line}: {source}")]
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
pub enum EntryKind {
    /// Anchors one stage's attested evidence.
    Commitment,
    /// Marks an earlier commitment invalid; `committed_digest` is that
    /// commitment's `entry_digest`.
    Revocation,
    /// Anchors the deploy record emitted after a successful run.
    Feedback,
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EntryKind::Commitment => "commitment",
            EntryKind::Revocation => "revocation",
            EntryKind::Feedback => "feedback",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub index: u64,
    pub entry_kind: EntryKind,
    pub committed_digest: Digest,
    pub pipeline_id: Digest,
    pub stage_index: u64,
    pub reason: Option<String>,
    pub prev_entry_digest: Digest,
    pub entry_digest: Digest,
}

#[derive(Serialize)]
struct EntryBody<'a> {
    index: u64,
    entry_kind: EntryKind,
    committed_digest: &'a Digest,
    pipeline_id: &'a Digest,
    stage_index: u64,
    reason: &'a Option<String>,
    prev_entry_digest: &'a Digest,
}

impl LedgerEntry {
    pub fn compute_digest(&self) -> Result<Digest, EncodingError> {
        digest_of(&EntryBody {
            index: self.index,
            entry_kind: self.entry_kind,
            committed_digest: &self.committed_digest,
            pipeline_id: &self.pipeline_id,
            stage_index: self.stage_index,
            reason: &self.reason,
            prev_entry_digest: &self.prev_entry_digest,
        })
    }

    pub fn digest_ok(&self) -> bool {
        matches!(self.compute_digest(), Ok(d) if d == self.entry_digest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainVerdict {
    pub ok: bool,
    pub first_bad_index: Option<u64>,
    pub entries_checked: u64,
}

/// Walk the chain from index 0, recomputing every digest and link.
pub fn verify_chain(entries: &[LedgerEntry]) -> ChainVerdict {
    let mut prev = Digest::ZERO;
    for (i, e) in entries.iter().enumerate() {
        if e.index != i as u64 || e.prev_entry_digest != prev || !e.digest_ok() {
            return ChainVerdict {
                ok: false,
                first_bad_index: Some(i as u64),
                entries_checked: i as u64 + 1,
            };
        }
        prev = e.entry_digest;
    }
    ChainVerdict {
        ok: true,
        first_bad_index: None,
        entries_checked: entries.len() as u64,
    }
}

/// Parse ledger file contents. On a malformed line the entries before it are
/// returned together with that line's index.
pub fn parse_entries(bytes: &[u8]) -> (Vec<LedgerEntry>, Option<(u64, EncodingError)>) {
    let mut out = Vec::new();
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if body.is_empty() {
        return (out, None);
    }
    for line in body.split(|b| *b == b'\n') {
        match canonical::decode_exact::<LedgerEntry>(line) {
            Ok(e) => out.push(e),
            Err(err) => {
                let idx = out.len() as u64;
                return (out, Some((idx, err)));
            }
        }
    }
    (out, None)
}

/// Verify a ledger file's bytes: unparseable lines count as the first bad
/// index just like digest mismatches do.
pub fn verify_chain_bytes(bytes: &[u8]) -> ChainVerdict {
    let (entries, err) = parse_entries(bytes);
    let v = verify_chain(&entries);
    match (v.ok, err) {
        (true, Some((idx, _))) => ChainVerdict {
            ok: false,
            first_bad_index: Some(idx),
            entries_checked: idx + 1,
        },
        _ => v,
    }
}

/// The ledger. Exactly one writer may append at a time; wrap in a mutex to
/// share it between concurrent runs.
#[derive(Debug)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    path: Option<PathBuf>,
    file_len: u64,
    by_committed: BTreeMap<Digest, u64>,
    revocations: BTreeMap<u64, u64>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Ledger {
            entries: Vec::new(),
            path: None,
            file_len: 0,
            by_committed: BTreeMap::new(),
            revocations: BTreeMap::new(),
        }
    }

    /// Open (or create) a file-backed ledger. The file must parse; use
    /// [`verify_chain`] to check its integrity.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (entries, err) = parse_entries(&bytes);
        if let Some((idx, source)) = err {
            return Err(LedgerError::Parse {
                line: idx as usize + 1,
                source,
            });
        }
        let mut ledger = Ledger::from_entries(entries);
        ledger.path = Some(path);
        ledger.file_len = bytes.len() as u64;
        Ok(ledger)
    }

    /// Ledger view over entries that were read elsewhere.
    pub fn from_entries(entries: Vec<LedgerEntry>) -> Self {
        let mut l = Ledger::in_memory();
        for e in entries {
            l.index_entry(&e);
            l.entries.push(e);
        }
        l
    }

    fn index_entry(&mut self, e: &LedgerEntry) {
        match e.entry_kind {
            EntryKind::Commitment | EntryKind::Feedback => {
                self.by_committed.entry(e.committed_digest).or_insert(e.index);
            }
            EntryKind::Revocation => {
                if let Some(target) = self
                    .entries
                    .iter()
                    .find(|c| c.entry_kind == EntryKind::Commitment && c.entry_digest == e.committed_digest)
                {
                    self.revocations.entry(target.index).or_insert(e.index);
                }
            }
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: u64) -> Option<&LedgerEntry> {
        self.entries.get(index as usize)
    }

    /// Digest of the latest entry; all-zero for an empty ledger.
    pub fn head(&self) -> Digest {
        self.entries.last().map_or(Digest::ZERO, |e| e.entry_digest)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Entry anchoring `digest` (commitment or feedback).
    pub fn find_commitment(&self, digest: &Digest) -> Option<&LedgerEntry> {
        self.by_committed.get(digest).and_then(|i| self.get(*i))
    }

    pub fn is_revoked(&self, commitment_index: u64) -> bool {
        self.revocations.contains_key(&commitment_index)
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_chain(&self.entries)
    }

    fn append(
        &mut self,
        entry_kind: EntryKind,
        committed_digest: Digest,
        pipeline_id: Digest,
        stage_index: u64,
        reason: Option<String>,
    ) -> Result<LedgerEntry, LedgerError> {
        let mut entry = LedgerEntry {
            index: self.entries.len() as u64,
            entry_kind,
            committed_digest,
            pipeline_id,
            stage_index,
            reason,
            prev_entry_digest: self.head(),
            entry_digest: Digest::ZERO,
        };
        entry.entry_digest = entry.compute_digest()?;
        if let Some(path) = &self.path {
            let mut line = canonical::encode(&entry)?.into_vec();
            line.push(b'\n');
            let found = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
            if found != self.file_len {
                return Err(LedgerError::AppendRace {
                    expected: self.file_len,
                    found,
                });
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(&line)?;
            f.sync_data()?;
            self.file_len += line.len() as u64;
        }
        self.index_entry(&entry);
        self.entries.push(entry.clone());
        Ok(entry)
    }

    /// Anchor attested evidence. The evidence must still authenticate and
    /// either carry a quote or be the stage-0 origin record.
    pub fn f_commit(&mut self, e: &AttestedEvidence, keystore: &Keystore) -> Result<LedgerEntry, LedgerError> {
        if let Some(p) = auth_problem(&e.auth, keystore) {
            return Err(LedgerError::InvalidEvidence(p.to_string()));
        }
        let shape_ok = if e.origin {
            e.stage_index() == 0 && e.quote.is_none()
        } else {
            e.stage_index() > 0 && e.quote.is_some()
        };
        if !shape_ok {
            return Err(LedgerError::InvalidEvidence("attestation fields missing".into()));
        }
        let digest = e.digest()?;
        if self.by_committed.contains_key(&digest) {
            return Err(LedgerError::AlreadyCommitted(digest));
        }
        self.append(
            EntryKind::Commitment,
            digest,
            e.raw().pipeline_id,
            e.stage_index(),
            None,
        )
    }

    /// Anchor a deploy record.
    pub fn commit_feedback(
        &mut self,
        record_digest: Digest,
        pipeline_id: Digest,
        stage_index: u64,
    ) -> Result<LedgerEntry, LedgerError> {
        self.append(EntryKind::Feedback, record_digest, pipeline_id, stage_index, None)
    }

    /// Revoke a commitment. Revoking twice returns the original revocation.
    pub fn revoke(&mut self, commitment: &LedgerEntry, reason: &str) -> Result<LedgerEntry, LedgerError> {
        let stored = self
            .get(commitment.index)
            .filter(|e| *e == commitment && e.entry_kind == EntryKind::Commitment)
            .ok_or(LedgerError::UnknownCommitment(commitment.index))?
            .clone();
        if let Some(&rev) = self.revocations.get(&stored.index) {
            return Ok(self.entries[rev as usize].clone());
        }
        self.append(
            EntryKind::Revocation,
            stored.entry_digest,
            stored.pipeline_id,
            stored.stage_index,
            Some(reason.to_string()),
        )
    }

    /// Revoke by index.
    pub fn revoke_index(&mut self, index: u64, reason: &str) -> Result<LedgerEntry, LedgerError> {
        let c = self.get(index).cloned().ok_or(LedgerError::UnknownCommitment(index))?;
        self.revoke(&c, reason)
    }

    /// Latest commitment entry of a pipeline.
    pub fn latest_commitment(&self, pipeline_id: &Digest) -> Option<&LedgerEntry> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.entry_kind == EntryKind::Commitment && e.pipeline_id == *pipeline_id)
    }

    /// Entries after `index` up to the head.
    pub fn segment_after(&self, index: u64) -> &[LedgerEntry] {
        let start = (index as usize + 1).min(self.entries.len());
        &self.entries[start..]
    }

    pub fn to_lines(&self) -> Result<Vec<u8>, EncodingError> {
        let mut out = Vec::new();
        for e in &self.entries {
            out.extend_from_slice(canonical::encode(e)?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{self, keygen_with, KeyRecord, KeyRole};
    use crate::evidence::{f_auth, Metadata, PayloadKind, RawEvidence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn origin(actor: &KeyRecord, ks: &Keystore, n: u64) -> AttestedEvidence {
        let raw = RawEvidence::for_payload(
            crypto::hash(format!("pipeline-{n}").as_bytes()),
            0,
            "trigger",
            format!("commit {n}").as_bytes(),
            PayloadKind::Trigger,
            None,
            Metadata::new(n as i64, "alice"),
        )
        .unwrap();
        AttestedEvidence::origin(f_auth(raw, Digest::ZERO, actor).unwrap(), ks, 0).unwrap()
    }

    fn keys() -> (KeyRecord, Keystore) {
        let mut r = ChaCha20Rng::seed_from_u64(5);
        let a = keygen_with(KeyRole::Actor, None, &mut r).unwrap();
        let ks: Keystore = [a.public_only()].into_iter().collect();
        (a, ks)
    }

    /// Independent re-implementation: hashes the canonical JSON of each
    /// entry with `entry_digest` removed, via a generic JSON value.
    fn brute_force_first_bad(entries: &[LedgerEntry]) -> Option<u64> {
        let mut prev = Digest::ZERO;
        for (i, e) in entries.iter().enumerate() {
            let mut v = serde_json::to_value(e).unwrap();
            let stored = v.as_object_mut().unwrap().remove("entry_digest").unwrap();
            let recomputed = crypto::hash(canonical::encode_value(&v).unwrap().as_bytes());
            let linked = v["prev_entry_digest"].as_str().unwrap() == prev.to_hex();
            let indexed = v["index"].as_u64() == Some(i as u64);
            if stored.as_str() != Some(&recomputed.to_hex()) || !linked || !indexed {
                return Some(i as u64);
            }
            prev = recomputed;
        }
        None
    }

    #[test]
    fn origin_commit_starts_chain() {
        let (a, ks) = keys();
        let mut l = Ledger::in_memory();
        assert!(verify_chain(&[]).ok);
        assert_eq!(l.head(), Digest::ZERO);
        let e = l.f_commit(&origin(&a, &ks, 0), &ks).unwrap();
        assert_eq!(e.index, 0);
        assert_eq!(e.prev_entry_digest, Digest::ZERO);
        assert_eq!(l.head(), e.entry_digest);
    }

    #[test]
    fn chain_of_ten_verifies_and_localizes_bit_flip() {
        let (a, ks) = keys();
        let mut l = Ledger::in_memory();
        for n in 0..10 {
            l.f_commit(&origin(&a, &ks, n), &ks).unwrap();
        }
        assert_eq!(l.verify(), ChainVerdict { ok: true, first_bad_index: None, entries_checked: 10 });
        assert_eq!(brute_force_first_bad(l.entries()), None);

        let mut entries = l.entries().to_vec();
        let mut bytes = *entries[5].committed_digest.as_bytes();
        bytes[31] ^= 0x01;
        entries[5].committed_digest = Digest::from_bytes(bytes);
        let v = verify_chain(&entries);
        assert!(!v.ok);
        assert_eq!(v.first_bad_index, Some(5));
        assert_eq!(brute_force_first_bad(&entries), Some(5));
    }

    #[test]
    fn file_backed_ledger_detects_rewrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let (a, ks) = keys();
        let mut l = Ledger::open(&path).unwrap();
        for n in 0..4 {
            l.f_commit(&origin(&a, &ks, n), &ks).unwrap();
        }
        let reopened = Ledger::open(&path).unwrap();
        assert_eq!(reopened.entries(), l.entries());

        let text = fs::read_to_string(&path).unwrap();
        let target = l.entries()[2].committed_digest.to_hex();
        let forged = crypto::hash(b"forged").to_hex();
        fs::write(&path, text.replacen(&target, &forged, 1)).unwrap();
        let v = verify_chain_bytes(&fs::read(&path).unwrap());
        assert_eq!(v.first_bad_index, Some(2));
    }

    #[test]
    fn unparseable_line_is_first_bad_index() {
        let (a, ks) = keys();
        let mut l = Ledger::in_memory();
        for n in 0..3 {
            l.f_commit(&origin(&a, &ks, n), &ks).unwrap();
        }
        let mut bytes = l.to_lines().unwrap();
        let second_line = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
        bytes[second_line + 1] = b'X';
        assert_eq!(verify_chain_bytes(&bytes).first_bad_index, Some(1));
    }

    #[test]
    fn concurrent_writer_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let (a, ks) = keys();
        let mut w1 = Ledger::open(&path).unwrap();
        let mut w2 = Ledger::open(&path).unwrap();
        w1.f_commit(&origin(&a, &ks, 0), &ks).unwrap();
        assert!(matches!(
            w2.f_commit(&origin(&a, &ks, 1), &ks),
            Err(LedgerError::AppendRace { expected: 0, .. })
        ));
    }

    #[test]
    fn revoke_is_idempotent_and_checked() {
        let (a, ks) = keys();
        let mut l = Ledger::in_memory();
        let mut cs = Vec::new();
        for n in 0..4 {
            cs.push(l.f_commit(&origin(&a, &ks, n), &ks).unwrap());
        }
        let r1 = l.revoke(&cs[3], "leaked key").unwrap();
        assert!(l.is_revoked(3));
        assert!(!l.is_revoked(2));
        let r2 = l.revoke(&cs[3], "again").unwrap();
        assert_eq!(r1, r2);
        assert_eq!(l.len(), 5);
        assert!(matches!(l.revoke_index(42, "x"), Err(LedgerError::UnknownCommitment(42))));
        assert!(matches!(l.revoke(&r1, "x"), Err(LedgerError::UnknownCommitment(_))));
        assert!(l.verify().ok);

        let reloaded = Ledger::from_entries(l.entries().to_vec());
        assert!(reloaded.is_revoked(3));
    }

    #[test]
    fn commit_rejects_unverifiable_and_duplicates() {
        let (a, ks) = keys();
        let mut l = Ledger::in_memory();
        let e = origin(&a, &ks, 0);
        l.f_commit(&e, &ks).unwrap();
        assert!(matches!(l.f_commit(&e, &ks), Err(LedgerError::AlreadyCommitted(_))));
        let mut bad = origin(&a, &ks, 1);
        bad.auth.raw.task_id = "other".into();
        assert!(matches!(l.f_commit(&bad, &ks), Err(LedgerError::InvalidEvidence(_))));
        let mut fake = origin(&a, &ks, 2);
        fake.origin = false;
        assert!(matches!(l.f_commit(&fake, &ks), Err(LedgerError::InvalidEvidence(_))));
    }
}

//! Digests, key records, the in-process key directory and signature envelopes.
//!
//! Hashing is SHA-256 and signatures are Ed25519. Keys carry an optional
//! endorsement (`cert`) from another key; TEE identity keys must be endorsed
//! by a manufacturer root, which is how the simulated hardware PKI works.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::canonical::{self, CanonicalBytes, EncodingError};

pub const DIGEST_LEN: usize = 32;
pub const DIGEST_ALGORITHM: &str = "sha-256";

#[derive(Debug, thiserror::Error)]
pub enum CryptoError {
    #[error("tee-identity keys require a manufacturer-root endorser")]
    MissingEndorser,
    #[error("key {0} has no private part")]
    MissingPrivateKey(Digest),
    #[error("unknown signer {0}")]
    UnknownSigner(Digest),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("keystore line {line}: {source}")]
    KeystoreParse {
        line: usize,
        #[source]
        source: EncodingError,
    },
    #[error("keystore record {0} is inconsistent: key_id does not match public key")]
    KeyIdMismatch(Digest),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A SHA-256 digest. Serializes as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    /// The all-zero digest, used as the "no predecessor" sentinel.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub const fn from_bytes(bytes: [u8; DIGEST_LEN]) -> Self {
        Digest(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn algorithm(&self) -> &'static str {
        DIGEST_ALGORITHM
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; DIGEST_LEN]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Strict parse: exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, String> {
        if s.len() != DIGEST_LEN * 2 {
            return Err(format!("digest must be {} hex chars, got {}", DIGEST_LEN * 2, s.len()));
        }
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err("digest hex must be lowercase".into());
        }
        let mut out = [0u8; DIGEST_LEN];
        hex::decode_to_slice(s, &mut out).map_err(|e| e.to_string())?;
        Ok(Digest(out))
    }

    /// Short prefix for log lines.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..6])
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Digest::from_hex(s)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// SHA-256 over arbitrary bytes.
pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// SHA-256 over the concatenation of several byte strings.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

pub fn hash_canonical(bytes: &CanonicalBytes) -> Digest {
    hash(bytes.as_bytes())
}

/// Canonically encode a value and hash it.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> Result<Digest, EncodingError> {
    Ok(hash(canonical::encode(value)?.as_bytes()))
}

/// Lowercase hex (de)serialization for fixed-size byte arrays.
pub(crate) mod hex_array {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(
        bytes: &[u8; N],
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(
        deserializer: D,
    ) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(deserializer)?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(serde::de::Error::custom("hex must be lowercase"));
        }
        let mut out = [0u8; N];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(out)
    }
}

mod hex_array_opt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        bytes: &Option<[u8; 32]>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => serializer.serialize_str(&hex::encode(b)),
            None => serializer.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<Option<[u8; 32]>, D::Error> {
        let s = Option::<String>::deserialize(deserializer)?;
        match s {
            None => Ok(None),
            Some(s) => {
                if s.bytes().any(|b| b.is_ascii_uppercase()) {
                    return Err(serde::de::Error::custom("hex must be lowercase"));
                }
                let mut out = [0u8; 32];
                hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
                Ok(Some(out))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyRole {
    /// Developers and other humans who trigger pipelines.
    Actor,
    /// Keys held inside a TEE that sign stage outputs.
    System,
    TeeIdentity,
    ManufacturerRoot,
}

impl fmt::Display for KeyRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyRole::Actor => "actor",
            KeyRole::System => "system",
            KeyRole::TeeIdentity => "tee-identity",
            KeyRole::ManufacturerRoot => "manufacturer-root",
        })
    }
}

impl FromStr for KeyRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "actor" => Ok(KeyRole::Actor),
            "system" => Ok(KeyRole::System),
            "tee-identity" => Ok(KeyRole::TeeIdentity),
            "manufacturer-root" => Ok(KeyRole::ManufacturerRoot),
            other => Err(format!("unknown key role `{other}`")),
        }
    }
}

/// Endorsement of a key by another key: a signature over
/// `hash(canonical {"key_id", "role"})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endorsement {
    pub endorser_key_id: Digest,
    #[serde(with = "hex_array")]
    pub signature: [u8; 64],
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRecord {
    pub key_id: Digest,
    pub role: KeyRole,
    #[serde(with = "hex_array")]
    pub public_key: [u8; 32],
    #[serde(with = "hex_array_opt")]
    pub private_key: Option<[u8; 32]>,
    pub cert: Option<Endorsement>,
}

impl fmt::Debug for KeyRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyRecord")
            .field("key_id", &self.key_id)
            .field("role", &self.role)
            .field("private", &self.private_key.is_some())
            .field("cert", &self.cert.as_ref().map(|c| c.endorser_key_id))
            .finish()
    }
}

fn endorsement_payload(key_id: &Digest, role: KeyRole) -> Digest {
    #[derive(Serialize)]
    struct Payload<'a> {
        key_id: &'a Digest,
        role: KeyRole,
    }
    digest_of(&Payload { key_id, role }).expect("endorsement payload is always encodable")
}

impl KeyRecord {
    pub fn has_private(&self) -> bool {
        self.private_key.is_some()
    }

    /// Copy without the private part, suitable for publishing.
    pub fn public_only(&self) -> KeyRecord {
        KeyRecord {
            private_key: None,
            ..self.clone()
        }
    }

    fn signing_key(&self) -> Result<SigningKey, CryptoError> {
        let sk = self
            .private_key
            .ok_or(CryptoError::MissingPrivateKey(self.key_id))?;
        Ok(SigningKey::from_bytes(&sk))
    }

    fn verifying_key(&self) -> Result<VerifyingKey, CryptoError> {
        VerifyingKey::from_bytes(&self.public_key).map_err(|e| CryptoError::InvalidKey(e.to_string()))
    }

    /// key_id matches the public key, and the private part (if any) matches too.
    pub fn is_well_formed(&self) -> bool {
        if hash(&self.public_key) != self.key_id {
            return false;
        }
        match self.private_key {
            Some(sk) => SigningKey::from_bytes(&sk).verifying_key().to_bytes() == self.public_key,
            None => true,
        }
    }

    /// Check this key's endorsement signature against `endorser`.
    pub fn cert_verifies_under(&self, endorser: &KeyRecord) -> bool {
        let Some(cert) = &self.cert else { return false };
        if cert.endorser_key_id != endorser.key_id {
            return false;
        }
        let Ok(vk) = endorser.verifying_key() else { return false };
        let payload = endorsement_payload(&self.key_id, self.role);
        let sig = ed25519_dalek::Signature::from_bytes(&cert.signature);
        vk.verify(payload.as_bytes(), &sig).is_ok()
    }
}

/// Generate a fresh key using the OS RNG.
pub fn keygen(role: KeyRole, endorser: Option<&KeyRecord>) -> Result<KeyRecord, CryptoError> {
    keygen_with(role, endorser, &mut rand::rngs::OsRng)
}

/// Generate a key from the supplied RNG. Deterministic RNGs give
/// reproducible fixtures.
pub fn keygen_with<R: RngCore + CryptoRng>(
    role: KeyRole,
    endorser: Option<&KeyRecord>,
    rng: &mut R,
) -> Result<KeyRecord, CryptoError> {
    if role == KeyRole::TeeIdentity
        && !matches!(endorser, Some(e) if e.role == KeyRole::ManufacturerRoot)
    {
        return Err(CryptoError::MissingEndorser);
    }
    let sk = SigningKey::generate(rng);
    let public_key = sk.verifying_key().to_bytes();
    let key_id = hash(&public_key);
    let cert = match endorser {
        Some(e) => {
            let esk = e.signing_key()?;
            let payload = endorsement_payload(&key_id, role);
            Some(Endorsement {
                endorser_key_id: e.key_id,
                signature: esk.sign(payload.as_bytes()).to_bytes(),
            })
        }
        None => None,
    };
    Ok(KeyRecord {
        key_id,
        role,
        public_key,
        private_key: Some(sk.to_bytes()),
        cert,
    })
}

/// Signature over a payload digest's 32 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureEnvelope {
    pub signer_key_id: Digest,
    pub payload_digest: Digest,
    #[serde(with = "hex_array")]
    pub signature: [u8; 64],
}

pub fn sign(payload_digest: &Digest, key: &KeyRecord) -> Result<SignatureEnvelope, CryptoError> {
    let sk = key.signing_key()?;
    Ok(SignatureEnvelope {
        signer_key_id: key.key_id,
        payload_digest: *payload_digest,
        signature: sk.sign(payload_digest.as_bytes()).to_bytes(),
    })
}

/// True iff the envelope names `payload_digest` and its signature verifies
/// under the registered public key of the signer.
pub fn verify_signature(
    env: &SignatureEnvelope,
    payload_digest: &Digest,
    keystore: &Keystore,
) -> Result<bool, CryptoError> {
    let key = keystore
        .get(&env.signer_key_id)
        .ok_or(CryptoError::UnknownSigner(env.signer_key_id))?;
    if env.payload_digest != *payload_digest {
        return Ok(false);
    }
    let Some(vk) = keystore.verifying_key(&key.key_id) else { return Ok(false) };
    let sig = ed25519_dalek::Signature::from_bytes(&env.signature);
    Ok(vk.verify(payload_digest.as_bytes(), &sig).is_ok())
}

/// Longest endorsement chain followed before giving up.
const MAX_CHAIN_DEPTH: usize = 8;

/// The key directory. Persisted as one canonical-JSON key record per line.
///
/// Decoded public keys and endorsement results are cached on insert; records
/// cannot be modified in place, so the caches never go stale.
#[derive(Debug, Clone, Default)]
pub struct Keystore {
    keys: BTreeMap<Digest, KeyRecord>,
    verifying: BTreeMap<Digest, VerifyingKey>,
    endorsed: BTreeSet<Digest>,
}

impl PartialEq for Keystore {
    fn eq(&self, other: &Self) -> bool {
        self.keys == other.keys
    }
}

impl Eq for Keystore {}

impl Keystore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: KeyRecord) {
        let id = key.key_id;
        match key.verifying_key() {
            Ok(vk) => self.verifying.insert(id, vk),
            Err(_) => self.verifying.remove(&id),
        };
        self.keys.insert(id, key);
        let affected: Vec<Digest> = self
            .keys
            .values()
            .filter(|k| k.key_id == id || k.cert.as_ref().is_some_and(|c| c.endorser_key_id == id))
            .map(|k| k.key_id)
            .collect();
        for k in affected {
            if self.cert_valid(&self.keys[&k]) {
                self.endorsed.insert(k);
            } else {
                self.endorsed.remove(&k);
            }
        }
    }

    fn cert_valid(&self, key: &KeyRecord) -> bool {
        let Some(cert) = &key.cert else { return false };
        let Some(vk) = self.verifying.get(&cert.endorser_key_id) else { return false };
        let payload = endorsement_payload(&key.key_id, key.role);
        let sig = ed25519_dalek::Signature::from_bytes(&cert.signature);
        vk.verify(payload.as_bytes(), &sig).is_ok()
    }

    pub(crate) fn verifying_key(&self, key_id: &Digest) -> Option<&VerifyingKey> {
        self.verifying.get(key_id)
    }

    pub fn get(&self, key_id: &Digest) -> Option<&KeyRecord> {
        self.keys.get(key_id)
    }

    pub fn contains(&self, key_id: &Digest) -> bool {
        self.keys.contains_key(key_id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KeyRecord> {
        self.keys.values()
    }

    /// Same directory with all private parts removed.
    pub fn public_only(&self) -> Keystore {
        Keystore {
            keys: self
                .keys
                .iter()
                .map(|(k, v)| (*k, v.public_only()))
                .collect(),
            verifying: self.verifying.clone(),
            endorsed: self.endorsed.clone(),
        }
    }

    /// Endorsement path from `key_id` up to a self-standing manufacturer root,
    /// starting with `key_id` itself. `None` if any link is missing or fails
    /// to verify.
    pub fn endorsement_chain(&self, key_id: &Digest) -> Option<Vec<Digest>> {
        let mut chain = vec![*key_id];
        let mut current = self.get(key_id)?;
        for _ in 0..MAX_CHAIN_DEPTH {
            if current.role == KeyRole::ManufacturerRoot {
                return Some(chain);
            }
            let cert = current.cert.as_ref()?;
            let endorser = self.get(&cert.endorser_key_id)?;
            if !self.endorsed.contains(&current.key_id) {
                return None;
            }
            chain.push(endorser.key_id);
            current = endorser;
        }
        None
    }

    /// A tee-identity key is trusted iff it is directly endorsed by a
    /// registered manufacturer root. Returns that root's key_id.
    pub fn tee_root(&self, tee_key_id: &Digest) -> Option<Digest> {
        let key = self.get(tee_key_id)?;
        if key.role != KeyRole::TeeIdentity {
            return None;
        }
        let chain = self.endorsement_chain(tee_key_id)?;
        (chain.len() == 2).then(|| chain[1])
    }

    pub fn to_lines(&self) -> Result<Vec<u8>, CryptoError> {
        let mut out = Vec::new();
        for key in self.keys.values() {
            out.extend_from_slice(canonical::encode(key)?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Parse keystore file contents. Blank lines are skipped; every other
    /// line must be a canonical key record whose key_id matches its key.
    pub fn parse(bytes: &[u8]) -> Result<Keystore, CryptoError> {
        let mut ks = Keystore::new();
        for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if line.iter().all(|b| b.is_ascii_whitespace()) {
                continue;
            }
            let rec: KeyRecord = canonical::decode(line)
                .map_err(|source| CryptoError::KeystoreParse { line: i + 1, source })?;
            if !rec.is_well_formed() {
                return Err(CryptoError::KeyIdMismatch(rec.key_id));
            }
            ks.insert(rec);
        }
        Ok(ks)
    }

    pub fn load(path: &Path) -> Result<Keystore, CryptoError> {
        Keystore::parse(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CryptoError> {
        std::fs::write(path, self.to_lines()?)?;
        Ok(())
    }
}

impl FromIterator<KeyRecord> for Keystore {
    fn from_iter<I: IntoIterator<Item = KeyRecord>>(iter: I) -> Self {
        let mut ks = Keystore::new();
        for k in iter {
            ks.insert(k);
        }
        ks
    }
}

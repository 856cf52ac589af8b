//! Simulated trusted execution environment.
//!
//! A [`TeeInstance`] stands in for a hardware enclave: at launch it receives
//! a fresh identity key endorsed by a manufacturer root (the simulated
//! hardware PKI) and records the measurement of the task it runs. Quotes
//! bind that measurement to caller-supplied report data; [`f_attest`] checks
//! a quote against a [`ReferenceEnvironment`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{
    self, digest_of, hash_parts, hex_array, keygen_with, CryptoError, Digest, KeyRecord, KeyRole,
    Keystore, SignatureEnvelope,
};
use crate::dbs::TaskSpec;
use crate::evidence::{auth_problem, AttestedEvidence, AuthProblem, AuthenticatedEvidence};

pub type Labels = BTreeMap<String, String>;

#[derive(Serialize)]
struct MeasuredState<'a> {
    env: &'a Labels,
    task: &'a Digest,
}

/// Digest of a task (by its digest) inside an environment.
pub fn measure_digest(task_digest: &Digest, env: &Labels) -> Digest {
    digest_of(&MeasuredState {
        env,
        task: task_digest,
    })
    .expect("labels and digests always encode")
}

pub fn measure(task: &TaskSpec, env: &Labels) -> Result<Digest, EncodingError> {
    Ok(measure_digest(&task.digest()?, env))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEnvironment {
    pub env_id: Digest,
    pub task_digest: Digest,
    pub labels: Labels,
    pub allowed_tee_roots: Vec<Digest>,
    pub expected_measurement: Digest,
}

#[derive(Serialize)]
struct EnvIdBody<'a> {
    allowed_tee_roots: &'a [Digest],
    expected_measurement: &'a Digest,
    labels: &'a Labels,
    task_digest: &'a Digest,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("reference environment {0} does not recompute")]
    Inconsistent(Digest),
    #[error("line {line}: {source}")]
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

impl ReferenceEnvironment {
    pub fn new(
        task: &TaskSpec,
        labels: Labels,
        mut allowed_tee_roots: Vec<Digest>,
    ) -> Result<Self, EncodingError> {
        allowed_tee_roots.sort();
        allowed_tee_roots.dedup();
        let task_digest = task.digest()?;
        let expected_measurement = measure_digest(&task_digest, &labels);
        let env_id = digest_of(&EnvIdBody {
            allowed_tee_roots: &allowed_tee_roots,
            expected_measurement: &expected_measurement,
            labels: &labels,
            task_digest: &task_digest,
        })?;
        Ok(ReferenceEnvironment {
            env_id,
            task_digest,
            labels,
            allowed_tee_roots,
            expected_measurement,
        })
    }

    /// Both the measurement and the id recompute from the stored descriptor.
    pub fn is_consistent(&self) -> bool {
        if measure_digest(&self.task_digest, &self.labels) != self.expected_measurement {
            return false;
        }
        let sorted = self.allowed_tee_roots.windows(2).all(|w| w[0] < w[1]);
        sorted
            && matches!(digest_of(&EnvIdBody {
                allowed_tee_roots: &self.allowed_tee_roots,
                expected_measurement: &self.expected_measurement,
                labels: &self.labels,
                task_digest: &self.task_digest,
            }), Ok(id) if id == self.env_id)
    }

    /// Parse one canonical descriptor and check it recomputes.
    pub fn parse(bytes: &[u8]) -> Result<Self, EnvError> {
        let env: ReferenceEnvironment = canonical::decode(bytes)?;
        if !env.is_consistent() {
            return Err(EnvError::Inconsistent(env.env_id));
        }
        Ok(env)
    }
}

/// Reference environments by id. File form: one canonical descriptor per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnvSet {
    envs: BTreeMap<Digest, ReferenceEnvironment>,
}

impl EnvSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, env: ReferenceEnvironment) {
        self.envs.insert(env.env_id, env);
    }

    pub fn get(&self, id: &Digest) -> Option<&ReferenceEnvironment> {
        self.envs.get(id)
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReferenceEnvironment> {
        self.envs.values()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn to_lines(&self) -> Result<Vec<u8>, EncodingError> {
        let mut out = Vec::new();
        for env in self.envs.values() {
            out.extend_from_slice(canonical::encode(env)?.as_bytes());
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, EnvError> {
        let mut set = EnvSet::new();
        for (i, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let env = ReferenceEnvironment::parse(line).map_err(|e| match e {
                EnvError::Encoding(source) => EnvError::Parse { line: i + 1, source },
                other => other,
            })?;
            set.insert(env);
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_lines()?)?;
        Ok(())
    }
}

impl Extend<ReferenceEnvironment> for EnvSet {
    fn extend<I: IntoIterator<Item = ReferenceEnvironment>>(&mut self, iter: I) {
        for e in iter {
            self.insert(e);
        }
    }
}

impl FromIterator<ReferenceEnvironment> for EnvSet {
    fn from_iter<I: IntoIterator<Item = ReferenceEnvironment>>(iter: I) -> Self {
        let mut s = EnvSet::new();
        for e in iter {
            s.insert(e);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LaunchOptions {
    /// Simulates the build script being modified after the environment was
    /// set up: the enclave ends up measuring different code.
    pub tamper: bool,
}

/// One enclave, used for exactly one stage execution.
#[derive(Debug)]
pub struct TeeInstance {
    identity: KeyRecord,
    system_key: KeyRecord,
    measurement: Digest,
    env_id: Digest,
}

impl TeeInstance {
    pub fn identity(&self) -> &KeyRecord {
        &self.identity
    }

    /// The stage-signing key generated inside the enclave, endorsed by the
    /// identity key.
    pub fn system_key(&self) -> &KeyRecord {
        &self.system_key
    }

    pub fn measurement(&self) -> Digest {
        self.measurement
    }

    pub fn env_id(&self) -> Digest {
        self.env_id
    }

    /// Public halves of the enclave keys, for registration in a keystore.
    pub fn public_keys(&self) -> [KeyRecord; 2] {
        [self.identity.public_only(), self.system_key.public_only()]
    }
}

/// Launch an enclave running `task` under `env`'s labels.
pub fn tee_launch<R: RngCore + CryptoRng>(
    env: &ReferenceEnvironment,
    task: &TaskSpec,
    root: &KeyRecord,
    opts: LaunchOptions,
    rng: &mut R,
) -> Result<TeeInstance, CryptoError> {
    if root.role != KeyRole::ManufacturerRoot {
        return Err(CryptoError::MissingEndorser);
    }
    let identity = keygen_with(KeyRole::TeeIdentity, Some(root), rng)?;
    let system_key = keygen_with(KeyRole::System, Some(&identity), rng)?;
    let measurement = if opts.tamper {
        let mut modified = task.clone();
        modified
            .params
            .insert("build-script".into(), "modified-after-attestation".into());
        measure(&modified, &env.labels)?
    } else {
        measure(task, &env.labels)?
    };
    Ok(TeeInstance {
        identity,
        system_key,
        measurement,
        env_id: env.env_id,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestationQuote {
    pub tee_key_id: Digest,
    pub measurement: Digest,
    pub report_data: Digest,
    #[serde(with = "hex_array")]
    pub nonce: [u8; 16],
    pub quote_signature: SignatureEnvelope,
}

/// `H(measurement ‖ report_data ‖ nonce)`.
pub fn quote_payload(measurement: &Digest, report_data: &Digest, nonce: &[u8; 16]) -> Digest {
    hash_parts(&[measurement.as_bytes(), report_data.as_bytes(), nonce])
}

pub fn produce_quote<R: RngCore>(
    tee: &TeeInstance,
    report_data: Digest,
    rng: &mut R,
) -> AttestationQuote {
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let payload = quote_payload(&tee.measurement, &report_data, &nonce);
    let quote_signature =
        crypto::sign(&payload, &tee.identity).expect("enclave identity always has a private key");
    AttestationQuote {
        tee_key_id: tee.identity.key_id,
        measurement: tee.measurement,
        report_data,
        nonce,
        quote_signature,
    }
}

/// Why attestation produced ⊥.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestFailure {
    /// (a) quote signature invalid, or signed by a key other than tee_key_id.
    BadQuoteSignature,
    /// (b) TEE key unknown, not a tee-identity key, or not endorsed by an
    /// allowed and registered manufacturer root.
    UntrustedTee,
    /// (c)
    MeasurementMismatch { expected: Digest, actual: Digest },
    /// (d)
    ReportDataMismatch,
    /// (e)
    Unauthenticated(AuthProblem),
    /// Record claims to be an origin or lacks a quote where one is required.
    MissingQuote,
    UnknownEnvironment(Digest),
}

impl fmt::Display for AttestFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttestFailure::BadQuoteSignature => f.write_str("quote signature invalid"),
            AttestFailure::UntrustedTee => f.write_str("tee key does not chain to an allowed root"),
            AttestFailure::MeasurementMismatch { expected, actual } => write!(
                f,
                "measurement {} does not match reference {}",
                actual.short(),
                expected.short()
            ),
            AttestFailure::ReportDataMismatch => f.write_str("quote report data not bound to evidence"),
            AttestFailure::Unauthenticated(p) => write!(f, "authentication: {p}"),
            AttestFailure::MissingQuote => f.write_str("attestation quote missing"),
            AttestFailure::UnknownEnvironment(id) => write!(f, "unknown reference environment {}", id.short()),
        }
    }
}

impl std::error::Error for AttestFailure {}

/// Every check `f_attest` makes, in order; returns the first failure.
pub fn quote_problem(
    e: &AuthenticatedEvidence,
    quote: &AttestationQuote,
    env: &ReferenceEnvironment,
    keystore: &Keystore,
) -> Option<AttestFailure> {
    // (a)
    let payload = quote_payload(&quote.measurement, &quote.report_data, &quote.nonce);
    let sig_ok = quote.quote_signature.signer_key_id == quote.tee_key_id
        && matches!(
            crypto::verify_signature(&quote.quote_signature, &payload, keystore),
            Ok(true)
        );
    if !sig_ok {
        return Some(AttestFailure::BadQuoteSignature);
    }
    // (b)
    match keystore.tee_root(&quote.tee_key_id) {
        Some(root) if env.allowed_tee_roots.contains(&root) => {}
        _ => return Some(AttestFailure::UntrustedTee),
    }
    // (c)
    if quote.measurement != env.expected_measurement {
        return Some(AttestFailure::MeasurementMismatch {
            expected: env.expected_measurement,
            actual: quote.measurement,
        });
    }
    // (d)
    if quote.report_data != e.bound_digest {
        return Some(AttestFailure::ReportDataMismatch);
    }
    // (e)
    auth_problem(e, keystore).map(AttestFailure::Unauthenticated)
}

/// Attest authenticated evidence. `Err` is ⊥; the reason is logged.
pub fn f_attest(
    e: AuthenticatedEvidence,
    quote: AttestationQuote,
    env: &ReferenceEnvironment,
    keystore: &Keystore,
    attested_at: i64,
) -> Result<AttestedEvidence, AttestFailure> {
    if let Some(problem) = quote_problem(&e, &quote, env, keystore) {
        log::warn!(
            "attestation rejected: pipeline={} stage={} env={} reason={}",
            e.raw.pipeline_id.short(),
            e.raw.stage_index,
            env.env_id.short(),
            problem
        );
        return Err(problem);
    }
    Ok(AttestedEvidence {
        auth: e,
        quote: Some(quote),
        env_id: Some(env.env_id),
        origin: false,
        attested_at,
    })
}

/// Re-check an already attested record (as read back from a bundle),
/// looking its environment up in `envs`.
pub fn attested_problem(
    att: &AttestedEvidence,
    envs: &EnvSet,
    keystore: &Keystore,
) -> Option<AttestFailure> {
    let env = att.env_id.and_then(|id| envs.get(&id));
    if att.origin || att.auth.raw.stage_index == 0 {
        if !(att.origin
            && att.auth.raw.stage_index == 0
            && att.quote.is_none()
            && att.env_id.is_none())
        {
            return Some(AttestFailure::MissingQuote);
        }
        return auth_problem(&att.auth, keystore).map(AttestFailure::Unauthenticated);
    }
    let Some(quote) = &att.quote else {
        return Some(AttestFailure::MissingQuote);
    };
    let Some(env_id) = att.env_id else {
        return Some(AttestFailure::UnknownEnvironment(Digest::ZERO));
    };
    let Some(env) = env.filter(|e| e.env_id == env_id) else {
        return Some(AttestFailure::UnknownEnvironment(env_id));
    };
    quote_problem(&att.auth, quote, env, keystore)
}

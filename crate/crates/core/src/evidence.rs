//! Stage-typed evidence records and the Raw → Authenticated transition.
//!
//! Evidence moves through four states. Each state wraps the previous one,
//! so an [`ActionedEvidence`] carries its whole history:
//!
//! ```text
//! RawEvidence ──f_auth──▶ AuthenticatedEvidence ──f_attest──▶ AttestedEvidence ──f_eval──▶ ActionedEvidence
//! ```
//!
//! The authentication step binds each stage to its predecessor: the signed
//! `bound_digest` is `H(canonical(raw) ‖ prev_actioned_digest)`. Stage 0 uses
//! the all-zero digest as its predecessor and is signed by an actor key; all
//! later stages are signed by a system key held inside the stage's TEE.
//!
//! Failure of `f_auth` is a value ([`AuthFailure`]), not a panic or an I/O
//! error: the pipeline branches on it.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{self, hash_parts, Digest, KeyRecord, KeyRole, Keystore, SignatureEnvelope};
use crate::store::{ContentStore, StoreError};
use crate::tee::AttestationQuote;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Trigger,
    BuildOutput,
    TestReport,
    AuditReport,
    DeployRecord,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Trigger => "trigger",
            PayloadKind::BuildOutput => "build-output",
            PayloadKind::TestReport => "test-report",
            PayloadKind::AuditReport => "audit-report",
            PayloadKind::DeployRecord => "deploy-record",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    /// Epoch seconds.
    pub timestamp: i64,
    pub actor_id: String,
    pub labels: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(timestamp: i64, actor_id: impl Into<String>) -> Self {
        Metadata {
            timestamp,
            actor_id: actor_id.into(),
            labels: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.labels.insert(k.into(), v.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEvidence {
    pub pipeline_id: Digest,
    pub stage_index: u64,
    pub task_id: String,
    pub payload_digest: Digest,
    pub payload_kind: PayloadKind,
    /// Artifact this evidence speaks about, once one exists.
    pub subject: Option<Digest>,
    pub metadata: Metadata,
}

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("stage {stage} cannot carry payload kind {kind} (trigger iff stage 0)")]
    StageKind { stage: u64, kind: PayloadKind },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

fn stage_kind_ok(stage: u64, kind: PayloadKind) -> bool {
    (stage == 0) == (kind == PayloadKind::Trigger)
}

impl RawEvidence {
    /// Build a raw record for `payload` without storing it.
    pub fn for_payload(
        pipeline_id: Digest,
        stage_index: u64,
        task_id: impl Into<String>,
        payload: &[u8],
        payload_kind: PayloadKind,
        subject: Option<Digest>,
        metadata: Metadata,
    ) -> Result<Self, EvidenceError> {
        if !stage_kind_ok(stage_index, payload_kind) {
            return Err(EvidenceError::StageKind {
                stage: stage_index,
                kind: payload_kind,
            });
        }
        Ok(RawEvidence {
            pipeline_id,
            stage_index,
            task_id: task_id.into(),
            payload_digest: crypto::hash(payload),
            payload_kind,
            subject,
            metadata,
        })
    }

    pub fn canonical_bytes(&self) -> Result<canonical::CanonicalBytes, EncodingError> {
        canonical::encode(self)
    }
}

/// Content-address `payload` into `store` and describe it as raw evidence.
#[allow(clippy::too_many_arguments)]
pub fn make_raw(
    pipeline_id: Digest,
    stage_index: u64,
    task_id: &str,
    payload: &[u8],
    payload_kind: PayloadKind,
    subject: Option<Digest>,
    metadata: Metadata,
    store: &ContentStore,
) -> Result<RawEvidence, EvidenceError> {
    let raw = RawEvidence::for_payload(
        pipeline_id,
        stage_index,
        task_id,
        payload,
        payload_kind,
        subject,
        metadata,
    )?;
    store.put(payload)?;
    Ok(raw)
}

/// Key role a stage's authentication signature must come from.
pub fn required_role(stage_index: u64) -> KeyRole {
    if stage_index == 0 {
        KeyRole::Actor
    } else {
        KeyRole::System
    }
}

/// `H(canonical(raw) ‖ prev)`.
pub fn bind(raw: &RawEvidence, prev_actioned_digest: &Digest) -> Result<Digest, EncodingError> {
    let enc = raw.canonical_bytes()?;
    Ok(hash_parts(&[enc.as_bytes(), prev_actioned_digest.as_bytes()]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthenticatedEvidence {
    pub raw: RawEvidence,
    pub prev_actioned_digest: Digest,
    pub bound_digest: Digest,
    pub signature: SignatureEnvelope,
}

/// Why authentication produced ⊥.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthFailure {
    #[error("stage {stage} requires a {required} key, got {actual}")]
    WrongRole {
        stage: u64,
        required: KeyRole,
        actual: KeyRole,
    },
    #[error("signing key has no private part")]
    NoPrivateKey,
    #[error("stage 0 must bind to the all-zero predecessor")]
    OriginHasPredecessor,
    #[error("stage {stage} cannot carry payload kind {kind}")]
    StageKind { stage: u64, kind: PayloadKind },
    #[error("raw evidence is not encodable: {0}")]
    Encoding(String),
}

/// Authenticate raw evidence against its predecessor. `Err` is ⊥.
pub fn f_auth(
    raw: RawEvidence,
    prev_actioned_digest: Digest,
    key: &KeyRecord,
) -> Result<AuthenticatedEvidence, AuthFailure> {
    let required = required_role(raw.stage_index);
    if key.role != required {
        return Err(AuthFailure::WrongRole {
            stage: raw.stage_index,
            required,
            actual: key.role,
        });
    }
    if !stage_kind_ok(raw.stage_index, raw.payload_kind) {
        return Err(AuthFailure::StageKind {
            stage: raw.stage_index,
            kind: raw.payload_kind,
        });
    }
    if raw.stage_index == 0 && !prev_actioned_digest.is_zero() {
        return Err(AuthFailure::OriginHasPredecessor);
    }
    let bound_digest =
        bind(&raw, &prev_actioned_digest).map_err(|e| AuthFailure::Encoding(e.to_string()))?;
    let signature = crypto::sign(&bound_digest, key).map_err(|_| AuthFailure::NoPrivateKey)?;
    Ok(AuthenticatedEvidence {
        raw,
        prev_actioned_digest,
        bound_digest,
        signature,
    })
}

/// Why an authenticated record fails verification. `None` from
/// [`auth_problem`] means it verifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthProblem {
    BindingMismatch,
    SignatureEnvelopeMismatch,
    UnknownSigner,
    BadSignature,
    WrongRole,
    StageKind,
    OriginHasPredecessor,
}

impl fmt::Display for AuthProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuthProblem::BindingMismatch => "bound digest does not recompute",
            AuthProblem::SignatureEnvelopeMismatch => "signature covers a different digest",
            AuthProblem::UnknownSigner => "signer not in keystore",
            AuthProblem::BadSignature => "signature invalid",
            AuthProblem::WrongRole => "signer role wrong for stage",
            AuthProblem::StageKind => "payload kind wrong for stage",
            AuthProblem::OriginHasPredecessor => "origin record has a predecessor",
        })
    }
}

pub fn auth_problem(e: &AuthenticatedEvidence, keystore: &Keystore) -> Option<AuthProblem> {
    if !stage_kind_ok(e.raw.stage_index, e.raw.payload_kind) {
        return Some(AuthProblem::StageKind);
    }
    if e.raw.stage_index == 0 && !e.prev_actioned_digest.is_zero() {
        return Some(AuthProblem::OriginHasPredecessor);
    }
    match bind(&e.raw, &e.prev_actioned_digest) {
        Ok(d) if d == e.bound_digest => {}
        _ => return Some(AuthProblem::BindingMismatch),
    }
    if e.signature.payload_digest != e.bound_digest {
        return Some(AuthProblem::SignatureEnvelopeMismatch);
    }
    let Some(signer) = keystore.get(&e.signature.signer_key_id) else {
        return Some(AuthProblem::UnknownSigner);
    };
    if signer.role != required_role(e.raw.stage_index) {
        return Some(AuthProblem::WrongRole);
    }
    match crypto::verify_signature(&e.signature, &e.bound_digest, keystore) {
        Ok(true) => None,
        Ok(false) => Some(AuthProblem::BadSignature),
        Err(_) => Some(AuthProblem::UnknownSigner),
    }
}

/// True iff the binding recomputes, the signature verifies and the signer's
/// role matches the stage.
pub fn verify_auth(e: &AuthenticatedEvidence, keystore: &Keystore) -> bool {
    auth_problem(e, keystore).is_none()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestedEvidence {
    pub auth: AuthenticatedEvidence,
    /// `None` only for the origin record.
    pub quote: Option<AttestationQuote>,
    /// Reference environment the quote was checked against.
    pub env_id: Option<Digest>,
    pub origin: bool,
    pub attested_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LifecycleError {
    #[error("authenticated evidence does not verify: {0}")]
    Unauthenticated(AuthProblem),
    #[error("only stage 0 may skip attestation")]
    OriginAtNonZeroStage,
    #[error("attestation does not verify: {0}")]
    Unattested(String),
    #[error("actioned digest does not recompute")]
    ActionedDigestMismatch,
    #[error("encoding: {0}")]
    Encoding(String),
}

impl AttestedEvidence {
    /// Stage 0 is not attested: e_att⁰ is e_auth⁰ wrapped with a null quote.
    pub fn origin(
        auth: AuthenticatedEvidence,
        keystore: &Keystore,
        attested_at: i64,
    ) -> Result<Self, LifecycleError> {
        if auth.raw.stage_index != 0 {
            return Err(LifecycleError::OriginAtNonZeroStage);
        }
        if let Some(p) = auth_problem(&auth, keystore) {
            return Err(LifecycleError::Unauthenticated(p));
        }
        Ok(AttestedEvidence {
            auth,
            quote: None,
            env_id: None,
            origin: true,
            attested_at,
        })
    }

    pub fn stage_index(&self) -> u64 {
        self.auth.raw.stage_index
    }

    pub fn raw(&self) -> &RawEvidence {
        &self.auth.raw
    }

    /// Digest anchored in the ledger for this record.
    pub fn digest(&self) -> Result<Digest, EncodingError> {
        crypto::digest_of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Proceed,
    Reject,
    Revoke,
}

impl Action {
    pub fn aborts(self) -> bool {
        !matches!(self, Action::Proceed)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Proceed => "PROCEED",
            Action::Reject => "REJECT",
            Action::Revoke => "REVOKE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleResult {
    pub rule_id: String,
    pub passed: bool,
    pub advisory: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionedEvidence {
    pub att: AttestedEvidence,
    pub action: Action,
    pub policy_id: Digest,
    pub rule_results: Vec<RuleResult>,
    pub actioned_digest: Digest,
}

#[derive(Serialize)]
struct ActionedBody<'a> {
    att: &'a AttestedEvidence,
    action: Action,
    policy_id: &'a Digest,
    rule_results: &'a [RuleResult],
}

impl ActionedEvidence {
    /// Seal a decision over attested evidence. Only the policy engine calls
    /// this; it does not check the attestation itself.
    pub(crate) fn seal(
        att: AttestedEvidence,
        action: Action,
        policy_id: Digest,
        rule_results: Vec<RuleResult>,
    ) -> Result<Self, EncodingError> {
        let actioned_digest = crypto::digest_of(&ActionedBody {
            att: &att,
            action,
            policy_id: &policy_id,
            rule_results: &rule_results,
        })?;
        Ok(ActionedEvidence {
            att,
            action,
            policy_id,
            rule_results,
            actioned_digest,
        })
    }

    pub fn recompute_digest(&self) -> Result<Digest, EncodingError> {
        crypto::digest_of(&ActionedBody {
            att: &self.att,
            action: self.action,
            policy_id: &self.policy_id,
            rule_results: &self.rule_results,
        })
    }

    pub fn digest_ok(&self) -> bool {
        matches!(self.recompute_digest(), Ok(d) if d == self.actioned_digest)
    }

    pub fn stage_index(&self) -> u64 {
        self.att.stage_index()
    }

    pub fn raw(&self) -> &RawEvidence {
        &self.att.auth.raw
    }
}

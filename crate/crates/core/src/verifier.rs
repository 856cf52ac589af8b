//! Consumer-side verification.
//!
//! [`quick_verify`] checks only the final actioned evidence and its ledger
//! commitment against a pinned ledger head, so its work does not depend on
//! how many stages the pipeline had. [`full_audit`] re-walks every stage.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, BundleError};
use crate::crypto::{hash, Digest, Keystore};
use crate::evidence::{auth_problem, Action, ActionedEvidence, AttestedEvidence, AuthProblem};
use crate::ledger::{verify_chain, EntryKind, Ledger, LedgerEntry};
use crate::policy::{f_eval, Policy, PolicyContext};
use crate::tee::{attested_problem, AttestFailure, EnvSet};

/// Checks made by [`quick_verify`], whatever the input.
pub const QUICK_CHECKS: u64 = 10;
/// Checks [`full_audit`] makes per bundled stage.
pub const AUDIT_CHECKS_PER_STAGE: u64 = 12;
/// Checks [`full_audit`] makes once per bundle.
pub const AUDIT_GLOBAL_CHECKS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Quick,
    FullAudit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    StageOrder,
    PipelineMismatch,
    PayloadDigest,
    ActionedDigest,
    Binding,
    Signature,
    Attestation,
    PolicyMismatch,
    PolicyDecision,
    NotProceed,
    NotCommitted,
    CommitmentMismatch,
    Revoked,
    LedgerChain,
    HeadNotCovered,
    ArtifactBinding,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "at", content = "index", rename_all = "kebab-case")]
pub enum Location {
    Stage(u64),
    Ledger(u64),
    Commitment,
    Artifact,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Stage(i) => write!(f, "stage {i}"),
            Location::Ledger(i) => write!(f, "ledger entry {i}"),
            Location::Commitment => f.write_str("commitment"),
            Location::Artifact => f.write_str("artifact"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyFinding {
    pub location: Location,
    pub kind: FailureKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mode: Mode,
    pub pass: bool,
    pub checks_performed: u64,
    pub findings: Vec<VerifyFinding>,
    pub elapsed_us: u64,
}

impl VerificationReport {
    pub fn has(&self, location: &Location, kind: FailureKind) -> bool {
        self.findings.iter().any(|f| f.location == *location && f.kind == kind)
    }

    pub fn failed_at(&self, location: &Location) -> bool {
        self.findings.iter().any(|f| f.location == *location)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            Mode::Quick => "quick verification",
            Mode::FullAudit => "full audit",
        };
        writeln!(
            f,
            "{mode}: {} ({} checks, {} finding(s), {} us)",
            if self.pass { "PASS" } else { "FAIL" },
            self.checks_performed,
            self.findings.len(),
            self.elapsed_us
        )?;
        for x in &self.findings {
            writeln!(f, "  {}: {}: {}", x.location, x.kind, x.detail)?;
        }
        Ok(())
    }
}

struct Checker {
    checks: u64,
    findings: Vec<VerifyFinding>,
}

impl Checker {
    fn new() -> Self {
        Checker {
            checks: 0,
            findings: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, location: Location, kind: FailureKind, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.findings.push(VerifyFinding {
                location,
                kind,
                detail: detail(),
            });
        }
    }

    fn report(self, mode: Mode, started: Instant) -> VerificationReport {
        VerificationReport {
            mode,
            pass: self.findings.is_empty(),
            checks_performed: self.checks,
            findings: self.findings,
            elapsed_us: started.elapsed().as_micros() as u64,
        }
    }
}

/// Authentication and attestation verdicts for one record. The attestation
/// check re-verifies authentication last, so a clean attestation settles
/// both without verifying twice.
fn verdicts(att: &AttestedEvidence, envs: &EnvSet, keystore: &Keystore) -> (Option<AuthProblem>, Option<AttestFailure>) {
    let attest = attested_problem(att, envs, keystore);
    let auth = match &attest {
        None => None,
        Some(AttestFailure::Unauthenticated(p)) => Some(*p),
        Some(_) => auth_problem(&att.auth, keystore),
    };
    (auth, attest)
}

fn auth_kind(p: AuthProblem) -> FailureKind {
    match p {
        AuthProblem::BindingMismatch => FailureKind::Binding,
        _ => FailureKind::Signature,
    }
}

/// Inputs a consumer holds for one released artifact.
pub struct QuickInput<'a> {
    pub artifact_digest: Digest,
    pub final_act: &'a ActionedEvidence,
    pub final_commitment: &'a LedgerEntry,
    /// Ledger entries after the commitment, up to and including the head.
    pub segment: &'a [LedgerEntry],
    /// Head digest pinned out of band.
    pub ledger_head: Digest,
    pub expected_policy_id: Digest,
}

/// Constant-work verification of a released artifact. Every check runs even
/// after an earlier one fails, so the count is always [`QUICK_CHECKS`].
pub fn quick_verify(input: &QuickInput<'_>, keystore: &Keystore, envs: &EnvSet) -> VerificationReport {
    let started = Instant::now();
    let mut c = Checker::new();
    let act = input.final_act;
    let commit = input.final_commitment;
    let att_digest = act.att.digest().ok();

    c.check(
        att_digest == Some(commit.committed_digest) && commit.entry_kind == EntryKind::Commitment,
        Location::Commitment,
        FailureKind::CommitmentMismatch,
        || "final evidence is not the committed record".into(),
    );
    c.check(commit.digest_ok(), Location::Ledger(commit.index), FailureKind::LedgerChain, || {
        "commitment entry digest does not recompute".into()
    });
    let covered = {
        let mut prev = commit.entry_digest;
        let mut ok = true;
        for (k, e) in input.segment.iter().enumerate() {
            ok &= e.index == commit.index + 1 + k as u64 && e.prev_entry_digest == prev && e.digest_ok();
            prev = e.entry_digest;
        }
        ok && prev == input.ledger_head
    };
    c.check(covered, Location::Commitment, FailureKind::HeadNotCovered, || {
        "commitment is not covered by the pinned ledger head".into()
    });
    let (auth, attest) = verdicts(&act.att, envs, keystore);
    c.check(auth.is_none(), Location::Stage(act.stage_index()), auth.map_or(FailureKind::Signature, auth_kind), || {
        format!("authentication: {}", auth.map(|p| p.to_string()).unwrap_or_default())
    });
    c.check(attest.is_none(), Location::Stage(act.stage_index()), FailureKind::Attestation, || {
        attest.map(|p| p.to_string()).unwrap_or_default()
    });
    c.check(act.digest_ok(), Location::Stage(act.stage_index()), FailureKind::ActionedDigest, || {
        "actioned digest does not recompute".into()
    });
    c.check(act.action == Action::Proceed, Location::Stage(act.stage_index()), FailureKind::NotProceed, || {
        format!("final action is {}", act.action)
    });
    c.check(
        act.policy_id == input.expected_policy_id,
        Location::Stage(act.stage_index()),
        FailureKind::PolicyMismatch,
        || format!("decided under policy {}", act.policy_id.short()),
    );
    c.check(
        act.raw().subject == Some(input.artifact_digest),
        Location::Artifact,
        FailureKind::ArtifactBinding,
        || format!("artifact {} is not the evidence subject", input.artifact_digest.short()),
    );
    let revoked = input
        .segment
        .iter()
        .any(|e| e.entry_kind == EntryKind::Revocation && e.committed_digest == commit.entry_digest);
    c.check(!revoked, Location::Ledger(commit.index), FailureKind::Revoked, || {
        "commitment has been revoked".into()
    });
    debug_assert_eq!(c.checks, QUICK_CHECKS);
    c.report(Mode::Quick, started)
}

/// Quick verification against a full ledger, using the entries after the
/// final commitment as the segment and the current head as the pin.
pub fn quick_verify_with_ledger(
    artifact_digest: Digest,
    final_act: &ActionedEvidence,
    ledger: &Ledger,
    expected_policy_id: Digest,
    keystore: &Keystore,
    envs: &EnvSet,
) -> VerificationReport {
    let commitment = final_act
        .att
        .digest()
        .ok()
        .and_then(|d| ledger.find_commitment(&d))
        .cloned()
        .unwrap_or_else(|| LedgerEntry {
            index: u64::MAX,
            entry_kind: EntryKind::Commitment,
            committed_digest: Digest::ZERO,
            pipeline_id: Digest::ZERO,
            stage_index: 0,
            reason: None,
            prev_entry_digest: Digest::ZERO,
            entry_digest: Digest::ZERO,
        });
    let segment = ledger.segment_after(commitment.index.min(ledger.len() as u64));
    quick_verify(
        &QuickInput {
            artifact_digest,
            final_act,
            final_commitment: &commitment,
            segment,
            ledger_head: ledger.head(),
            expected_policy_id,
        },
        keystore,
        envs,
    )
}

/// Re-verify every stage of a bundle: payload digests, signatures, quotes,
/// DAG bindings, policy decisions (by re-running the policy) and ledger
/// inclusion of each stage in order.
pub fn full_audit(
    bundle: &Bundle,
    ledger_entries: &[LedgerEntry],
    policy: &Policy,
    keystore: &Keystore,
    envs: &EnvSet,
) -> VerificationReport {
    let started = Instant::now();
    let mut c = Checker::new();
    let ledger = Ledger::from_entries(ledger_entries.to_vec());
    let content = bundle.payloads();
    let pctx = PolicyContext {
        keystore,
        envs,
        ledger: &ledger,
        content: &content,
    };

    let chain = verify_chain(ledger_entries);
    c.check(
        chain.ok,
        Location::Ledger(chain.first_bad_index.unwrap_or(0)),
        FailureKind::LedgerChain,
        || "ledger chain does not recompute".into(),
    );

    let pipeline_id = bundle.stages.first().map(|s| s.actioned.raw().pipeline_id);
    let mut prev_actioned = Digest::ZERO;
    let mut prev_commit: Option<u64> = None;
    for (pos, stage) in bundle.stages.iter().enumerate() {
        let pos = pos as u64;
        let act = &stage.actioned;
        let att = &act.att;
        let raw = act.raw();
        let here = Location::Stage(pos);

        c.check(raw.stage_index == pos, here.clone(), FailureKind::StageOrder, || {
            format!("record claims stage {}", raw.stage_index)
        });
        c.check(Some(raw.pipeline_id) == pipeline_id, here.clone(), FailureKind::PipelineMismatch, || {
            "record belongs to another pipeline".into()
        });
        c.check(hash(&stage.payload) == raw.payload_digest, here.clone(), FailureKind::PayloadDigest, || {
            "payload does not hash to payload_digest".into()
        });
        c.check(act.digest_ok(), here.clone(), FailureKind::ActionedDigest, || {
            "actioned digest does not recompute".into()
        });
        let (auth, attest) = verdicts(att, envs, keystore);
        c.check(auth.is_none(), here.clone(), auth.map_or(FailureKind::Signature, auth_kind), || {
            format!("authentication: {}", auth.map(|p| p.to_string()).unwrap_or_default())
        });
        c.check(attest.is_none(), here.clone(), FailureKind::Attestation, || {
            attest.map(|p| p.to_string()).unwrap_or_default()
        });
        c.check(att.auth.prev_actioned_digest == prev_actioned, here.clone(), FailureKind::Binding, || {
            "not bound to the previous stage's actioned evidence".into()
        });
        c.check(act.policy_id == policy.policy_id, here.clone(), FailureKind::PolicyMismatch, || {
            format!("decided under policy {}", act.policy_id.short())
        });
        let (decision, _) = f_eval(att, policy, &pctx);
        c.check(
            decision.action == act.action && decision.rule_results == act.rule_results,
            here.clone(),
            FailureKind::PolicyDecision,
            || format!("policy re-evaluation yields {}, record says {}", decision.action, act.action),
        );
        c.check(act.action == Action::Proceed, here.clone(), FailureKind::NotProceed, || {
            format!("action is {}", act.action)
        });
        let entry = att.digest().ok().and_then(|d| ledger.find_commitment(&d));
        let included = entry.is_some_and(|e| {
            e.entry_kind == EntryKind::Commitment
                && e.pipeline_id == raw.pipeline_id
                && e.stage_index == raw.stage_index
                && prev_commit.map_or(true, |p| e.index > p)
        });
        c.check(included, here.clone(), FailureKind::NotCommitted, || {
            "no matching ledger commitment in stage order".into()
        });
        c.check(!entry.is_some_and(|e| ledger.is_revoked(e.index)), here, FailureKind::Revoked, || {
            "commitment has been revoked".into()
        });

        prev_actioned = act.actioned_digest;
        prev_commit = entry.map(|e| e.index);
    }
    c.report(Mode::FullAudit, started)
}

/// Parse and audit bundle bytes. A bundle that does not parse is an error,
/// not a report.
pub fn full_audit_bytes(
    bundle: &[u8],
    ledger_entries: &[LedgerEntry],
    policy: &Policy,
    keystore: &Keystore,
    envs: &EnvSet,
) -> Result<VerificationReport, BundleError> {
    let b = Bundle::parse(bundle)?;
    Ok(full_audit(&b, ledger_entries, policy, keystore, envs))
}

/// Check count [`full_audit`] performs for a bundle of `stages` records.
pub const fn audit_check_count(stages: u64) -> u64 {
    AUDIT_CHECKS_PER_STAGE * stages + AUDIT_GLOBAL_CHECKS
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RunOptions;
    use crate::producer::test_support::{inputs, producer};
    use crate::producer::{Producer, ProducerConfig};

    fn clean(seed: u64) -> (Producer, Bundle) {
        let (mut p, mut rng) = producer(seed, &ProducerConfig::standard(inputs(false)));
        let run = p.run(b"push", &RunOptions::default(), &mut rng);
        assert!(run.completed());
        let b = run.bundle().unwrap();
        (p, b)
    }

    fn audit(p: &Producer, b: &Bundle) -> VerificationReport {
        let l = p.ledger.lock().unwrap();
        full_audit(b, l.entries(), &p.policy, &p.keystore, &p.envs)
    }

    fn quick(p: &Producer, b: &Bundle, artifact: Digest) -> VerificationReport {
        let l = p.ledger.lock().unwrap();
        quick_verify_with_ledger(artifact, b.final_actioned().unwrap(), &l, p.policy.policy_id, &p.keystore, &p.envs)
    }

    #[test]
    fn clean_run_passes_both_modes() {
        let (p, b) = clean(1);
        let r = audit(&p, &b);
        assert!(r.pass, "{r}");
        assert_eq!(r.checks_performed, audit_check_count(4));
        let art = b.final_actioned().unwrap().raw().subject.unwrap();
        let q = quick(&p, &b, art);
        assert!(q.pass, "{q}");
        assert_eq!(q.checks_performed, QUICK_CHECKS);
    }

    #[test]
    fn revoked_commitment_fails_quick_verification() {
        let (p, b) = clean(2);
        let art = b.final_actioned().unwrap().raw().subject.unwrap();
        p.ledger.lock().unwrap().revoke_index(3, "key compromise").unwrap();
        let q = quick(&p, &b, art);
        assert!(!q.pass);
        assert!(q.has(&Location::Ledger(3), FailureKind::Revoked));
        assert_eq!(q.checks_performed, QUICK_CHECKS);
        assert!(audit(&p, &b).has(&Location::Stage(3), FailureKind::Revoked));
    }

    #[test]
    fn unrelated_artifact_fails_binding() {
        let (p, b) = clean(3);
        let q = quick(&p, &b, hash(b"some other artifact"));
        assert_eq!(q.findings.len(), 1);
        assert_eq!(q.findings[0].kind, FailureKind::ArtifactBinding);
    }

    #[test]
    fn stale_head_is_not_covered() {
        let (p, b) = clean(4);
        let l = p.ledger.lock().unwrap();
        let act = b.final_actioned().unwrap();
        let commit = l.get(3).unwrap().clone();
        let q = quick_verify(
            &QuickInput {
                artifact_digest: act.raw().subject.unwrap(),
                final_act: act,
                final_commitment: &commit,
                segment: l.segment_after(3),
                ledger_head: hash(b"forked head"),
                expected_policy_id: p.policy.policy_id,
            },
            &p.keystore,
            &p.envs,
        );
        assert!(q.has(&Location::Commitment, FailureKind::HeadNotCovered));
    }

    #[test]
    fn payload_mutation_fails_at_its_stage() {
        let (p, mut b) = clean(5);
        b.stages[1].payload[10] ^= 0x20;
        let r = audit(&p, &b);
        assert!(!r.pass);
        assert!(r.has(&Location::Stage(1), FailureKind::PayloadDigest), "{r}");
        assert!(!r.failed_at(&Location::Stage(0)));
    }

    #[test]
    fn swapped_stages_break_bindings() {
        let (p, mut b) = clean(6);
        b.stages.swap(1, 2);
        let r = audit(&p, &b);
        // Stage 1 now holds the record that was bound to stage 1's actioned
        // digest, not stage 0's.
        assert!(r.has(&Location::Stage(1), FailureKind::Binding), "{r}");
        assert!(r.has(&Location::Stage(1), FailureKind::StageOrder));
        assert!(r.has(&Location::Stage(2), FailureKind::Binding));
        assert_eq!(r.checks_performed, audit_check_count(4));
    }

    #[test]
    fn wrong_policy_fails_audit() {
        let (p, b) = clean(7);
        let other = crate::policy::Policy::new(vec![]).unwrap();
        let l = p.ledger.lock().unwrap();
        let r = full_audit(&b, l.entries(), &other, &p.keystore, &p.envs);
        assert!((0..4).all(|i| r.has(&Location::Stage(i), FailureKind::PolicyMismatch)));
    }

    #[test]
    fn report_text_and_json() {
        let (p, b) = clean(8);
        let r = audit(&p, &b);
        assert!(r.to_string().starts_with("full audit: PASS"));
        let json = crate::canonical::encode(&r).unwrap();
        let back: VerificationReport = serde_json::from_slice(json.as_bytes()).unwrap();
        assert_eq!(back, r);
    }
}

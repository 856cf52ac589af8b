//! Policy sets and the evaluation function that gates every stage.
//!
//! A [`Policy`] is an ordered list of [`Rule`]s over a fixed predicate
//! vocabulary. Evaluation runs every applicable rule in order; the resulting
//! action is the `on_fail` of the first failing non-advisory rule, or
//! PROCEED when there is none. The decision is sealed into an
//! [`ActionedEvidence`], whose digest the next stage binds to.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{digest_of, Digest, Keystore};
use crate::dbs::{Report, Severity, TaskOutput};
use crate::evidence::{Action, ActionedEvidence, AttestedEvidence, LifecycleError, PayloadKind, RuleResult};
use crate::ledger::Ledger;
use crate::store::ContentSource;
use crate::tee::{attested_problem, EnvSet};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy file is malformed: {0}")]
    Parse(String),
    #[error("declared policy id {declared} does not match computed {computed}")]
    IdMismatch { declared: Digest, computed: Digest },
    #[error("duplicate rule id `{0}`")]
    DuplicateRule(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OnFail {
    Reject,
    Revoke,
}

impl From<OnFail> for Action {
    fn from(o: OnFail) -> Action {
        match o {
            OnFail::Reject => Action::Reject,
            OnFail::Revoke => Action::Revoke,
        }
    }
}

/// Which evidence a rule looks at. Absent lists match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppliesTo {
    #[serde(default)]
    pub stages: Option<Vec<u64>>,
    #[serde(default)]
    pub kinds: Option<Vec<PayloadKind>>,
}

impl AppliesTo {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn kinds(kinds: impl IntoIterator<Item = PayloadKind>) -> Self {
        AppliesTo {
            stages: None,
            kinds: Some(kinds.into_iter().collect()),
        }
    }

    pub fn matches(&self, stage: u64, kind: PayloadKind) -> bool {
        self.stages.as_ref().map_or(true, |s| s.contains(&stage))
            && self.kinds.as_ref().map_or(true, |k| k.contains(&kind))
    }
}

/// The closed predicate vocabulary. Parameters per predicate:
///
/// | `type`                   | parameters                          |
/// |--------------------------|-------------------------------------|
/// | `signer-in-allowlist`    | `keys`: key ids                     |
/// | `attestation-valid`      | none                                |
/// | `measurement-in-allowlist` | `digests`: measurements           |
/// | `tests-all-pass`         | none                                |
/// | `max-vuln-severity`      | `level`: LOW/MEDIUM/HIGH/CRITICAL   |
/// | `dependency-allowlist`   | `manifest_digests`: manifest digests |
/// | `ledger-not-revoked`     | none                                |
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Predicate {
    SignerInAllowlist { keys: Vec<Digest> },
    AttestationValid,
    MeasurementInAllowlist { digests: Vec<Digest> },
    TestsAllPass,
    MaxVulnSeverity { level: Severity },
    DependencyAllowlist { manifest_digests: Vec<Digest> },
    LedgerNotRevoked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub rule_id: String,
    #[serde(default)]
    pub applies_to: AppliesTo,
    pub predicate: Predicate,
    pub on_fail: OnFail,
    #[serde(default)]
    pub advisory: bool,
}

impl Rule {
    pub fn new(rule_id: impl Into<String>, predicate: Predicate, on_fail: OnFail) -> Self {
        Rule {
            rule_id: rule_id.into(),
            applies_to: AppliesTo::all(),
            predicate,
            on_fail,
            advisory: false,
        }
    }

    pub fn applies_to(mut self, a: AppliesTo) -> Self {
        self.applies_to = a;
        self
    }

    pub fn advisory(mut self) -> Self {
        self.advisory = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub policy_id: Digest,
    pub rules: Vec<Rule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    policy_id: Option<Digest>,
    rules: Vec<Rule>,
}

impl Policy {
    pub fn new(rules: Vec<Rule>) -> Result<Self, PolicyError> {
        let mut seen = BTreeSet::new();
        for r in &rules {
            if !seen.insert(r.rule_id.as_str()) {
                return Err(PolicyError::DuplicateRule(r.rule_id.clone()));
            }
        }
        let policy_id = digest_of(&rules).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Ok(Policy { policy_id, rules })
    }

    pub fn id_ok(&self) -> bool {
        matches!(digest_of(&self.rules), Ok(d) if d == self.policy_id)
    }

    pub fn to_canonical(&self) -> Result<Vec<u8>, EncodingError> {
        Ok(canonical::encode(self)?.into_vec())
    }
}

/// Parse a policy file. The id is recomputed from the rules and, when the
/// file declares one, must match.
pub fn load_policy(bytes: &[u8]) -> Result<Policy, PolicyError> {
    let file: PolicyFile =
        canonical::parse_relaxed(bytes).map_err(|e| PolicyError::Parse(e.to_string()))?;
    let policy = Policy::new(file.rules)?;
    if let Some(declared) = file.policy_id {
        if declared != policy.policy_id {
            return Err(PolicyError::IdMismatch {
                declared,
                computed: policy.policy_id,
            });
        }
    }
    Ok(policy)
}

pub fn load_policy_file(path: &Path) -> Result<Policy, PolicyError> {
    load_policy(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub action: Action,
    pub rule_results: Vec<RuleResult>,
}

/// What rules may consult besides the evidence itself.
pub struct PolicyContext<'a> {
    pub keystore: &'a Keystore,
    pub envs: &'a EnvSet,
    pub ledger: &'a Ledger,
    /// Where stage payloads (task outputs) can be fetched by digest.
    pub content: &'a dyn ContentSource,
}

fn load_output(e: &AttestedEvidence, ctx: &PolicyContext<'_>) -> Result<TaskOutput, String> {
    let bytes = ctx
        .content
        .fetch(&e.raw().payload_digest)
        .map_err(|err| format!("payload unavailable: {err}"))?;
    TaskOutput::parse(&bytes).map_err(|err| format!("payload is not a task output: {err}"))
}

fn check(pred: &Predicate, e: &AttestedEvidence, ctx: &PolicyContext<'_>) -> Result<String, String> {
    match pred {
        Predicate::SignerInAllowlist { keys } => {
            let signer = e.auth.signature.signer_key_id;
            let chain = ctx.keystore.endorsement_chain(&signer).unwrap_or_else(|| vec![signer]);
            match chain.iter().find(|k| keys.contains(k)) {
                Some(k) => Ok(format!("signer endorsed by allowed key {}", k.short())),
                None => Err(format!("signer {} not allowed", signer.short())),
            }
        }
        Predicate::AttestationValid => match attested_problem(e, ctx.envs, ctx.keystore) {
            None if e.origin => Ok("origin authenticated".into()),
            None => Ok("quote verified".into()),
            Some(p) => Err(p.to_string()),
        },
        Predicate::MeasurementInAllowlist { digests } => match &e.quote {
            Some(q) if digests.contains(&q.measurement) => Ok(format!("measurement {}", q.measurement.short())),
            Some(q) => Err(format!("measurement {} not allowed", q.measurement.short())),
            None => Err("no quote".into()),
        },
        Predicate::TestsAllPass => match load_output(e, ctx)?.report {
            Report::Test(t) if t.tests_failed == 0 => Ok(format!("{} tests passed", t.tests_total)),
            Report::Test(t) => Err(format!("{}/{} tests failed", t.tests_failed, t.tests_total)),
            _ => Err("not a test report".into()),
        },
        Predicate::MaxVulnSeverity { level } => match load_output(e, ctx)?.report {
            Report::Audit(a) => match a.max_severity {
                Some(s) if s > *level => Err(format!(
                    "{} finding(s), max severity {s} exceeds {level}",
                    a.findings.len()
                )),
                Some(s) => Ok(format!("max severity {s}")),
                None => Ok("no findings".into()),
            },
            _ => Err("not an audit report".into()),
        },
        Predicate::DependencyAllowlist { manifest_digests } => match load_output(e, ctx)?.report {
            Report::Audit(a) if manifest_digests.contains(&a.manifest_digest) => {
                Ok(format!("manifest {}", a.manifest_digest.short()))
            }
            Report::Audit(a) => Err(format!("manifest {} not allowed", a.manifest_digest.short())),
            _ => Err("not an audit report".into()),
        },
        Predicate::LedgerNotRevoked => {
            let d = e.digest().map_err(|err| err.to_string())?;
            match ctx.ledger.find_commitment(&d) {
                None => Err("no ledger commitment".into()),
                Some(c) if ctx.ledger.is_revoked(c.index) => Err(format!("commitment {} revoked", c.index)),
                Some(c) => Ok(format!("commitment {}", c.index)),
            }
        }
    }
}

/// Evaluate the policy over attested evidence and seal the decision.
///
/// This does not re-check the attestation; callers holding evidence of
/// unknown provenance use [`f_eval_checked`].
pub fn f_eval(
    e: &AttestedEvidence,
    policy: &Policy,
    ctx: &PolicyContext<'_>,
) -> (PolicyDecision, ActionedEvidence) {
    let stage = e.stage_index();
    let kind = e.raw().payload_kind;
    let mut action = Action::Proceed;
    let mut rule_results = Vec::new();
    for rule in policy.rules.iter().filter(|r| r.applies_to.matches(stage, kind)) {
        let (passed, detail) = match check(&rule.predicate, e, ctx) {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        if !passed && !rule.advisory && action == Action::Proceed {
            action = rule.on_fail.into();
        }
        rule_results.push(RuleResult {
            rule_id: rule.rule_id.clone(),
            passed,
            advisory: rule.advisory,
            detail,
        });
    }
    let decision = PolicyDecision {
        action,
        rule_results: rule_results.clone(),
    };
    let act = ActionedEvidence::seal(e.clone(), action, policy.policy_id, rule_results)
        .expect("attested evidence always encodes");
    (decision, act)
}

/// [`f_eval`] guarded by the lifecycle rule: actioned evidence can only be
/// made from attested evidence that still verifies.
pub fn f_eval_checked(
    e: &AttestedEvidence,
    policy: &Policy,
    ctx: &PolicyContext<'_>,
) -> Result<(PolicyDecision, ActionedEvidence), LifecycleError> {
    if let Some(p) = attested_problem(e, ctx.envs, ctx.keystore) {
        return Err(LifecycleError::Unattested(p.to_string()));
    }
    Ok(f_eval(e, policy, ctx))
}

//! Pipeline orchestration.
//!
//! Stage 0 authenticates the trigger with the actor key and commits it. Each
//! later stage first evaluates the previous stage's attested evidence, then
//! executes its task in a fresh enclave, authenticates the output bound to
//! the previous actioned digest, attests it and commits it. A final policy
//! check over the last stage gates the deploy record.
//!
//! Payloads are staged in a workspace store and only published to the
//! registry once the stage is committed, so an aborted run leaves no
//! registry evidence for the stages it did not finish.

use std::fmt;
use std::sync::Mutex;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, BundleStage, ManifestStage, RunManifest};
use crate::canonical::{self, EncodingError};
use crate::crypto::{hash, Digest, KeyRecord, Keystore};
use crate::dbs::{self, PipelineSpec};
use crate::evidence::{
    f_auth, Action, ActionedEvidence, AttestedEvidence, Metadata, PayloadKind, RawEvidence,
};
use crate::ledger::{Ledger, LedgerEntry, LedgerError};
use crate::policy::{f_eval, Policy, PolicyContext};
use crate::registry::{RecordKind, Registry, RegistryError};
use crate::store::{ContentStore, Layered};
use crate::tee::{f_attest, produce_quote, tee_launch, EnvSet, LaunchOptions};

/// Everything a producer needs to run pipelines.
pub struct RunContext<'a> {
    /// Trusted public keys. Enclave keys created during the run are added to
    /// a copy and reported in [`PipelineRun::tee_keys`].
    pub keystore: &'a Keystore,
    pub actor_key: &'a KeyRecord,
    /// Manufacturer root that endorses every enclave launched by this
    /// producer.
    pub tee_root: &'a KeyRecord,
    pub envs: &'a EnvSet,
    pub policy: &'a Policy,
    pub ledger: &'a Mutex<Ledger>,
    pub registry: &'a Registry,
    /// Holds task inputs and staged outputs.
    pub workspace: &'a ContentStore,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub timestamp: i64,
    /// Launch this stage's enclave tampered.
    pub tamper_stage: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AbortReason {
    /// f_auth returned ⊥.
    Authentication { detail: String },
    /// f_attest returned ⊥.
    Attestation { detail: String },
    /// The policy rejected or revoked the evidence of `evaluated_stage`.
    Policy { action: Action, evaluated_stage: u64 },
    Execution { detail: String },
    Ledger { detail: String },
    Setup { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Running,
    Completed,
    /// `at_stage` is the first stage that did not commit; `n + 1` for the
    /// final policy check.
    Aborted {
        at_stage: u64,
        reason: AbortReason,
        label: String,
    },
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Running => f.write_str("running"),
            RunStatus::Completed => f.write_str("completed"),
            RunStatus::Aborted { label, .. } => f.write_str(label),
        }
    }
}

/// One committed stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEvidence {
    pub att: AttestedEvidence,
    /// Set once the next iteration (or the final check) evaluates it.
    pub act: Option<ActionedEvidence>,
    pub payload: Vec<u8>,
    pub commitment: LedgerEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployRecord {
    pub pipeline_id: Digest,
    pub final_commitment_index: u64,
    pub final_commitment_digest: Digest,
    pub final_actioned_digest: Digest,
    pub artifact: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deployment {
    pub raw: RawEvidence,
    pub record: DeployRecord,
    pub entry: LedgerEntry,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub spec: PipelineSpec,
    pub status: RunStatus,
    pub evidence_chain: Vec<StageEvidence>,
    pub final_actioned: Option<ActionedEvidence>,
    pub deploy: Option<Deployment>,
    /// Public keys of every enclave launched during the run.
    pub tee_keys: Vec<KeyRecord>,
}

impl PipelineRun {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn commitments(&self) -> Vec<&LedgerEntry> {
        self.evidence_chain.iter().map(|s| &s.commitment).collect()
    }

    pub fn artifact_digest(&self) -> Option<Digest> {
        self.final_actioned.as_ref().and_then(|a| a.raw().subject)
    }

    /// Bundle of a completed run; `None` otherwise.
    pub fn bundle(&self) -> Option<Bundle> {
        if !self.completed() {
            return None;
        }
        let stages = self
            .evidence_chain
            .iter()
            .map(|s| {
                Some(BundleStage {
                    actioned: s.act.clone()?,
                    payload: s.payload.clone(),
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Bundle { stages })
    }

    pub fn manifest(&self, ledger_head: Digest) -> Result<RunManifest, EncodingError> {
        let stages = self
            .evidence_chain
            .iter()
            .map(|s| {
                Ok(ManifestStage {
                    stage_index: s.att.stage_index(),
                    task_id: s.att.raw().task_id.clone(),
                    payload_digest: s.att.raw().payload_digest,
                    attested_digest: s.att.digest()?,
                    actioned_digest: s.act.as_ref().map(|a| a.actioned_digest),
                    ledger_index: s.commitment.index,
                })
            })
            .collect::<Result<Vec<_>, EncodingError>>()?;
        let (aborted_at, label) = match &self.status {
            RunStatus::Aborted { at_stage, label, .. } => (Some(*at_stage), Some(label.clone())),
            _ => (None, None),
        };
        let bundle_digest = match self.bundle() {
            Some(b) => Some(hash(&b.to_bytes()?)),
            None => None,
        };
        Ok(RunManifest {
            pipeline_id: self.spec.pipeline_id,
            policy_id: self.spec.policy_id,
            status: if self.completed() { "completed" } else { "aborted" }.into(),
            aborted_at,
            label,
            stages,
            artifact_digest: self.artifact_digest(),
            final_commitment_index: self
                .completed()
                .then(|| self.evidence_chain.last().map(|s| s.commitment.index))
                .flatten(),
            deploy_record: self.deploy.as_ref().map(|d| d.raw.payload_digest),
            feedback_index: self.deploy.as_ref().map(|d| d.entry.index),
            ledger_head,
            bundle_digest,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("final action {0} does not permit deployment")]
    NotPermitted(Action),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("{0}")]
    Evidence(String),
}

/// Emit, store and commit the deploy record for a permitted final decision.
pub fn f_feedback(
    c: &LedgerEntry,
    e: &ActionedEvidence,
    registry: &Registry,
    ledger: &mut Ledger,
    timestamp: i64,
) -> Result<Deployment, FeedbackError> {
    if e.action != Action::Proceed {
        return Err(FeedbackError::NotPermitted(e.action));
    }
    let record = DeployRecord {
        pipeline_id: e.raw().pipeline_id,
        final_commitment_index: c.index,
        final_commitment_digest: c.entry_digest,
        final_actioned_digest: e.actioned_digest,
        artifact: e.raw().subject,
    };
    let payload = canonical::encode(&record)?;
    let stage = e.stage_index() + 1;
    let raw = RawEvidence::for_payload(
        record.pipeline_id,
        stage,
        "deploy",
        payload.as_bytes(),
        PayloadKind::DeployRecord,
        record.artifact,
        Metadata::new(timestamp, "deploy"),
    )
    .map_err(|err| FeedbackError::Evidence(err.to_string()))?;
    let raw_bytes = canonical::encode(&raw)?;
    let entry = ledger.commit_feedback(hash(raw_bytes.as_bytes()), record.pipeline_id, stage)?;
    registry.store(payload.as_bytes(), RecordKind::EvidenceBundle, Some(entry.index), Some(stage))?;
    registry.store(raw_bytes.as_bytes(), RecordKind::EvidenceBundle, Some(entry.index), Some(stage))?;
    Ok(Deployment { raw, record, entry })
}

struct Runner<'c, 'a, R> {
    ctx: &'c RunContext<'a>,
    keystore: Keystore,
    opts: &'c RunOptions,
    rng: &'c mut R,
    run: PipelineRun,
}

type Step<T> = Result<T, (u64, AbortReason)>;

fn setup(stage: u64, detail: impl fmt::Display) -> (u64, AbortReason) {
    (stage, AbortReason::Setup { detail: detail.to_string() })
}

fn label(stage: u64, n: u64, reason: &AbortReason) -> String {
    match reason {
        AbortReason::Policy { .. } if stage > n => "ABORT: Final Policy".into(),
        AbortReason::Policy { .. } => format!("ABORT: Stage {stage} Policy"),
        AbortReason::Authentication { .. } => format!("⊥: Stage {stage} Authentication"),
        AbortReason::Attestation { .. } => format!("⊥: Stage {stage} Attestation"),
        AbortReason::Execution { .. } => format!("ABORT: Stage {stage} Execution"),
        AbortReason::Ledger { .. } => format!("ABORT: Stage {stage} Ledger"),
        AbortReason::Setup { .. } => format!("ABORT: Stage {stage} Setup"),
    }
}

impl<R: RngCore + CryptoRng> Runner<'_, '_, R> {
    fn ledger(&self) -> std::sync::MutexGuard<'_, Ledger> {
        self.ctx.ledger.lock().expect("ledger lock poisoned")
    }

    fn commit(&mut self, att: AttestedEvidence, payload: Vec<u8>, artifact: Option<Digest>) -> Step<()> {
        let stage = att.stage_index();
        let ledger_err = |e: &dyn fmt::Display| (stage, AbortReason::Ledger { detail: e.to_string() });
        let entry = self.ledger().f_commit(&att, &self.keystore).map_err(|e| ledger_err(&e))?;
        let reg = self.ctx.registry;
        let publish = || -> Result<(), Box<dyn std::error::Error>> {
            let idx = Some(entry.index);
            reg.store(&payload, RecordKind::EvidenceBundle, idx, Some(stage))?;
            reg.store(canonical::encode(&att)?.as_bytes(), RecordKind::EvidenceBundle, idx, Some(stage))?;
            if let Some(a) = artifact {
                reg.store(&self.ctx.workspace.get(&a)?, RecordKind::Artifact, idx, Some(stage))?;
            }
            Ok(())
        };
        publish().map_err(|e| ledger_err(&e))?;
        self.run.evidence_chain.push(StageEvidence {
            att,
            act: None,
            payload,
            commitment: entry,
        });
        Ok(())
    }

    /// Evaluate the latest stage; abort (and revoke, if asked) on failure.
    fn evaluate(&mut self, at_stage: u64) -> Step<ActionedEvidence> {
        let last = self.run.evidence_chain.last().expect("stage 0 is committed first");
        let att = last.att.clone();
        let content = Layered {
            first: self.ctx.workspace,
            second: self.ctx.registry,
        };
        let (decision, act) = {
            let ledger = self.ledger();
            let pctx = PolicyContext {
                keystore: &self.keystore,
                envs: self.ctx.envs,
                ledger: &ledger,
                content: &content,
            };
            f_eval(&att, self.ctx.policy, &pctx)
        };
        self.run.evidence_chain.last_mut().expect("non-empty").act = Some(act.clone());
        if !decision.action.aborts() {
            return Ok(act);
        }
        if decision.action == Action::Revoke {
            let pid = self.run.spec.pipeline_id;
            let mut ledger = self.ledger();
            if let Some(c) = ledger.latest_commitment(&pid).cloned() {
                if let Err(e) = ledger.revoke(&c, "policy revoked") {
                    log::error!("revocation of entry {} failed: {e}", c.index);
                }
            }
        }
        Err((
            at_stage,
            AbortReason::Policy {
                action: decision.action,
                evaluated_stage: att.stage_index(),
            },
        ))
    }

    fn origin(&mut self, trigger: &[u8]) -> Step<()> {
        let spec = &self.run.spec;
        spec.validate().map_err(|e| setup(0, e))?;
        if spec.policy_id != self.ctx.policy.policy_id {
            return Err(setup(0, "pipeline names a different policy"));
        }
        let raw = RawEvidence::for_payload(
            spec.pipeline_id,
            0,
            "trigger",
            trigger,
            PayloadKind::Trigger,
            None,
            Metadata::new(self.opts.timestamp, self.ctx.actor_key.key_id.short()),
        )
        .map_err(|e| setup(0, e))?;
        let auth = f_auth(raw, Digest::ZERO, self.ctx.actor_key)
            .map_err(|e| (0, AbortReason::Authentication { detail: e.to_string() }))?;
        let att = AttestedEvidence::origin(auth, &self.keystore, self.opts.timestamp)
            .map_err(|e| (0, AbortReason::Authentication { detail: e.to_string() }))?;
        self.ctx.workspace.put(trigger).map_err(|e| setup(0, e))?;
        self.commit(att, trigger.to_vec(), None)
    }

    fn stage(&mut self, i: u64) -> Step<()> {
        let prev = self.evaluate(i)?;
        let task = self.run.spec.tasks[i as usize - 1].clone();
        let env_id = self.run.spec.env_refs[i as usize - 1];
        let env = self
            .ctx
            .envs
            .get(&env_id)
            .ok_or_else(|| setup(i, format!("reference environment {} not registered", env_id.short())))?;
        let opts = LaunchOptions {
            tamper: self.opts.tamper_stage == Some(i),
        };
        let tee = tee_launch(env, &task, self.ctx.tee_root, opts, self.rng).map_err(|e| setup(i, e))?;
        for k in tee.public_keys() {
            self.keystore.insert(k.clone());
            self.run.tee_keys.push(k);
        }

        let output = dbs::execute(&task, &prev, self.ctx.workspace)
            .map_err(|e| (i, AbortReason::Execution { detail: e.to_string() }))?;
        let payload = output
            .payload_bytes()
            .map_err(|e| (i, AbortReason::Execution { detail: e.to_string() }))?;
        self.ctx.workspace.put(&payload).map_err(|e| setup(i, e))?;
        let raw = RawEvidence::for_payload(
            self.run.spec.pipeline_id,
            i,
            task.task_id.clone(),
            &payload,
            output.output_kind,
            output.artifact.or(prev.raw().subject),
            Metadata::new(self.opts.timestamp, tee.system_key().key_id.short()),
        )
        .map_err(|e| (i, AbortReason::Execution { detail: e.to_string() }))?;

        let auth = f_auth(raw, prev.actioned_digest, tee.system_key())
            .map_err(|e| (i, AbortReason::Authentication { detail: e.to_string() }))?;
        let quote = produce_quote(&tee, auth.bound_digest, self.rng);
        let att = f_attest(auth, quote, env, &self.keystore, self.opts.timestamp)
            .map_err(|e| (i, AbortReason::Attestation { detail: e.to_string() }))?;
        let new_artifact = output.artifact.filter(|a| Some(*a) != prev.raw().subject);
        self.commit(att, payload, new_artifact)
    }

    fn drive(&mut self, trigger: &[u8]) -> Step<()> {
        self.origin(trigger)?;
        let n = self.run.spec.len() as u64;
        for i in 1..=n {
            self.stage(i)?;
        }
        let act = self.evaluate(n + 1)?;
        let c = self.run.evidence_chain.last().expect("n + 1 commitments").commitment.clone();
        let deployment = {
            let mut ledger = self.ledger();
            f_feedback(&c, &act, self.ctx.registry, &mut ledger, self.opts.timestamp)
        }
        .map_err(|e| (n + 1, AbortReason::Ledger { detail: e.to_string() }))?;
        self.run.final_actioned = Some(act);
        self.run.deploy = Some(deployment);
        Ok(())
    }
}

/// Run a pipeline end to end. Failures never escape as errors; they become
/// an aborted status.
pub fn run_pipeline<R: RngCore + CryptoRng>(
    trigger: &[u8],
    spec: &PipelineSpec,
    ctx: &RunContext<'_>,
    opts: &RunOptions,
    rng: &mut R,
) -> PipelineRun {
    let mut runner = Runner {
        ctx,
        keystore: ctx.keystore.clone(),
        opts,
        rng,
        run: PipelineRun {
            spec: spec.clone(),
            status: RunStatus::Running,
            evidence_chain: Vec::new(),
            final_actioned: None,
            deploy: None,
            tee_keys: Vec::new(),
        },
    };
    if let Ok(bytes) = ctx.policy.to_canonical() {
        let _ = ctx.registry.store(&bytes, RecordKind::Policy, None, None);
    }
    for id in &spec.env_refs {
        if let Some(env) = ctx.envs.get(id) {
            if let Ok(bytes) = canonical::encode(env) {
                let _ = ctx.registry.store(bytes.as_bytes(), RecordKind::EnvDescriptor, None, None);
            }
        }
    }
    let n = spec.len() as u64;
    runner.run.status = match runner.drive(trigger) {
        Ok(()) => RunStatus::Completed,
        Err((at_stage, reason)) => {
            let label = label(at_stage, n, &reason);
            log::info!("pipeline {} aborted: {label}", spec.pipeline_id.short());
            RunStatus::Aborted {
                at_stage,
                reason,
                label,
            }
        }
    };
    runner.run
}

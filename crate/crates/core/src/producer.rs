//! Producer-side setup: ingest inputs, derive the pipeline spec and its
//! reference environments, hold keys, ledger and registry, and run.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{keygen_with, CryptoError, Digest, KeyRecord, KeyRole, Keystore};
use crate::dbs::{
    self, DbsError, DependencyManifest, Document, PipelineSpec, Severity, SpecError, TaskKind,
    TaskSpec, TestSuite, VulnDb,
};
use crate::engine::{run_pipeline, PipelineRun, RunContext, RunOptions};
use crate::evidence::PayloadKind;
use crate::ledger::Ledger;
use crate::policy::{AppliesTo, OnFail, Policy, PolicyError, Predicate, Rule};
use crate::registry::Registry;
use crate::store::ContentStore;
use crate::tee::{EnvSet, Labels, ReferenceEnvironment};

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("task {task} needs input {input}, which was not provided")]
    MissingInput { task: String, input: InputName },
    #[error(transparent)]
    Dbs(#[from] DbsError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Encoding(#[from] crate::canonical::EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputName {
    Source,
    Manifest,
    VulnDb,
    Tests,
}

impl std::fmt::Display for InputName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputName::Source => "source",
            InputName::Manifest => "manifest",
            InputName::VulnDb => "vuln-db",
            InputName::Tests => "tests",
        })
    }
}

/// A task before its inputs are resolved to digests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskTemplate {
    pub task_id: String,
    pub kind: TaskKind,
    pub inputs: Vec<InputName>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl TaskTemplate {
    pub fn new(task_id: impl Into<String>, kind: TaskKind, inputs: &[InputName]) -> Self {
        TaskTemplate {
            task_id: task_id.into(),
            kind,
            inputs: inputs.to_vec(),
            params: BTreeMap::new(),
        }
    }
}

/// build → test → audit.
pub fn standard_tasks() -> Vec<TaskTemplate> {
    vec![
        TaskTemplate::new("build", TaskKind::Build, &[InputName::Source, InputName::Manifest]),
        TaskTemplate::new("test", TaskKind::Test, &[InputName::Tests]),
        TaskTemplate::new("audit", TaskKind::Audit, &[InputName::Manifest, InputName::VulnDb]),
    ]
}

/// A build followed by `n - 1` stages cycling test and audit.
pub fn tasks_of_length(n: usize) -> Vec<TaskTemplate> {
    let mut out = vec![TaskTemplate::new("build", TaskKind::Build, &[InputName::Source, InputName::Manifest])];
    for i in 1..n {
        out.push(if i % 2 == 1 {
            TaskTemplate::new(format!("test-{i}"), TaskKind::Test, &[InputName::Tests])
        } else {
            TaskTemplate::new(format!("audit-{i}"), TaskKind::Audit, &[InputName::Manifest, InputName::VulnDb])
        });
    }
    out
}

/// Signer allowlist, valid attestation, passing tests and a vulnerability
/// ceiling, all rejecting on failure.
pub fn standard_policy(trusted: Vec<Digest>, max_severity: Severity) -> Result<Policy, PolicyError> {
    Policy::new(vec![
        Rule::new("signer-trusted", Predicate::SignerInAllowlist { keys: trusted }, OnFail::Reject),
        Rule::new("attestation-valid", Predicate::AttestationValid, OnFail::Reject),
        Rule::new("tests-pass", Predicate::TestsAllPass, OnFail::Reject)
            .applies_to(AppliesTo::kinds([PayloadKind::TestReport])),
        Rule::new("vuln-ceiling", Predicate::MaxVulnSeverity { level: max_severity }, OnFail::Reject)
            .applies_to(AppliesTo::kinds([PayloadKind::AuditReport])),
        Rule::new("not-revoked", Predicate::LedgerNotRevoked, OnFail::Revoke),
    ])
}

/// Input documents, as loaded from fixtures or files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inputs {
    pub source: Vec<(String, Vec<u8>)>,
    pub manifest: Option<DependencyManifest>,
    pub vulndb: Option<VulnDb>,
    pub tests: Option<TestSuite>,
}

/// Input digests inside a workspace store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputDigests {
    pub source: Digest,
    pub manifest: Option<Digest>,
    pub vulndb: Option<Digest>,
    pub tests: Option<Digest>,
}

impl InputDigests {
    fn get(&self, name: InputName) -> Option<Digest> {
        match name {
            InputName::Source => Some(self.source),
            InputName::Manifest => self.manifest,
            InputName::VulnDb => self.vulndb,
            InputName::Tests => self.tests,
        }
    }
}

pub fn ingest(inputs: &Inputs, store: &ContentStore) -> Result<InputDigests, DbsError> {
    let source = dbs::ingest_files(inputs.source.iter().map(|(p, b)| (p.as_str(), b.as_slice())), store)?;
    let doc = |d: Document| d.store(store);
    Ok(InputDigests {
        source,
        manifest: inputs.manifest.clone().map(|m| doc(Document::DependencyManifest(m))).transpose()?,
        vulndb: inputs.vulndb.clone().map(|v| doc(Document::VulnerabilityDb(v))).transpose()?,
        tests: inputs.tests.clone().map(|t| doc(Document::TestSuite(t))).transpose()?,
    })
}

/// Resolve templates into a pipeline spec plus one reference environment per
/// task.
pub fn build_spec(
    templates: &[TaskTemplate],
    inputs: &InputDigests,
    labels: &Labels,
    allowed_roots: &[Digest],
    policy_id: Digest,
) -> Result<(PipelineSpec, EnvSet), SetupError> {
    let mut tasks = Vec::new();
    let mut envs = EnvSet::new();
    let mut env_refs = Vec::new();
    for t in templates {
        let refs = t
            .inputs
            .iter()
            .map(|n| {
                inputs.get(*n).ok_or(SetupError::MissingInput {
                    task: t.task_id.clone(),
                    input: *n,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut task = TaskSpec::new(t.task_id.clone(), t.kind, refs);
        task.params = t.params.clone();
        let env = ReferenceEnvironment::new(&task, labels.clone(), allowed_roots.to_vec())?;
        env_refs.push(env.env_id);
        envs.insert(env);
        tasks.push(task);
    }
    Ok((PipelineSpec::new(tasks, env_refs, policy_id)?, envs))
}

pub fn default_labels() -> Labels {
    [
        ("image".to_string(), "builder:1".to_string()),
        ("platform".to_string(), "x86_64-linux".to_string()),
    ]
    .into_iter()
    .collect()
}

/// A producer with keys, a single pipeline and its stores.
pub struct Producer {
    pub actor: KeyRecord,
    pub root: KeyRecord,
    /// Public keys only.
    pub keystore: Keystore,
    pub envs: EnvSet,
    pub policy: Policy,
    pub spec: PipelineSpec,
    pub inputs: InputDigests,
    pub workspace: ContentStore,
    pub registry: Registry,
    pub ledger: Mutex<Ledger>,
}

pub struct ProducerConfig {
    pub inputs: Inputs,
    pub tasks: Vec<TaskTemplate>,
    pub labels: Labels,
    pub max_severity: Severity,
}

impl ProducerConfig {
    pub fn standard(inputs: Inputs) -> Self {
        ProducerConfig {
            inputs,
            tasks: standard_tasks(),
            labels: default_labels(),
            max_severity: Severity::Medium,
        }
    }
}

impl Producer {
    /// Fresh keys, in-memory stores.
    pub fn new<R: RngCore + CryptoRng>(cfg: &ProducerConfig, rng: &mut R) -> Result<Self, SetupError> {
        let actor = keygen_with(KeyRole::Actor, None, rng)?;
        let root = keygen_with(KeyRole::ManufacturerRoot, None, rng)?;
        Producer::with_keys(cfg, actor, root, Registry::in_memory(), Ledger::in_memory())
    }

    pub fn with_keys(
        cfg: &ProducerConfig,
        actor: KeyRecord,
        root: KeyRecord,
        registry: Registry,
        ledger: Ledger,
    ) -> Result<Self, SetupError> {
        let keystore: Keystore = [actor.public_only(), root.public_only()].into_iter().collect();
        let policy = standard_policy(vec![actor.key_id, root.key_id], cfg.max_severity)?;
        let workspace = ContentStore::in_memory();
        let inputs = ingest(&cfg.inputs, &workspace)?;
        let (spec, envs) = build_spec(&cfg.tasks, &inputs, &cfg.labels, &[root.key_id], policy.policy_id)?;
        Ok(Producer {
            actor,
            root,
            keystore,
            envs,
            policy,
            spec,
            inputs,
            workspace,
            registry,
            ledger: Mutex::new(ledger),
        })
    }

    /// Run the pipeline and register the enclave keys it created.
    pub fn run<R: RngCore + CryptoRng>(&mut self, trigger: &[u8], opts: &RunOptions, rng: &mut R) -> PipelineRun {
        let run = {
            let ctx = RunContext {
                keystore: &self.keystore,
                actor_key: &self.actor,
                tee_root: &self.root,
                envs: &self.envs,
                policy: &self.policy,
                ledger: &self.ledger,
                registry: &self.registry,
                workspace: &self.workspace,
            };
            run_pipeline(trigger, &self.spec, &ctx, opts, rng)
        };
        for k in &run.tee_keys {
            self.keystore.insert(k.clone());
        }
        run
    }

    pub fn ledger_snapshot(&self) -> Ledger {
        Ledger::from_entries(self.ledger.lock().expect("ledger lock poisoned").entries().to_vec())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::crypto::hash;
    use crate::dbs::{Dependency, TestCase, VulnRecord};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub fn dep(name: &str, version: &str) -> Dependency {
        Dependency {
            name: name.into(),
            version: version.into(),
            content_digest: hash(format!("{name}@{version}").as_bytes()),
        }
    }

    /// Clean inputs; with `vulnerable`, the manifest pins an openssl release
    /// inside a HIGH advisory's range.
    pub fn inputs(vulnerable: bool) -> Inputs {
        let openssl = if vulnerable { "1.0.1" } else { "3.0.2" };
        Inputs {
            source: vec![
                ("src/main.rs".into(), b"fn main() { println!(\"hi\"); }".to_vec()),
                ("README.md".into(), b"# demo".to_vec()),
            ],
            manifest: Some(DependencyManifest::new(vec![dep("serde", "1.0.200"), dep("openssl", openssl)]).unwrap()),
            vulndb: Some(VulnDb {
                records: vec![VulnRecord {
                    id: "CVE-2014-0160".into(),
                    name: "openssl".into(),
                    introduced: Some("1.0.1".into()),
                    fixed: Some("1.0.2".into()),
                    severity: Severity::High,
                    content_digest: None,
                }],
            }),
            tests: Some(TestSuite {
                cases: vec![
                    TestCase { name: "has-main".into(), path: "src/main.rs".into(), expect_digest: None },
                    TestCase { name: "has-readme".into(), path: "README.md".into(), expect_digest: None },
                ],
            }),
        }
    }

    pub fn producer(seed: u64, cfg: &ProducerConfig) -> (Producer, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let p = Producer::new(cfg, &mut rng).unwrap();
        (p, rng)
    }
}

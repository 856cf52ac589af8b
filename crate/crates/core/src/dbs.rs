//! Deterministic build system simulator.
//!
//! Tasks are pure functions of content-addressed inputs. Everything a task
//! reads is resolved by digest from a [`ContentStore`]; every document it
//! reads or writes is canonical JSON tagged with a `type` field. A "build"
//! synthesizes an artifact document from the source tree and dependency
//! manifest, a "test" checks fixture cases against the artifact, and an
//! "audit" screens the manifest against a vulnerability database.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canonical::{self, EncodingError};
use crate::crypto::{self, digest_of, Digest};
use crate::evidence::{Action, ActionedEvidence, PayloadKind};
use crate::store::{ContentStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum DbsError {
    #[error("input {0} is not in the content store")]
    UnresolvedInput(Digest),
    #[error("predecessor action is {0}, expected PROCEED")]
    PreconditionViolated(Action),
    #[error("task {task} needs an input of type {needed}")]
    MissingInput { task: String, needed: &'static str },
    #[error("input {digest} is not a recognised document: {reason}")]
    BadInput { digest: Digest, reason: String },
    #[error("dependency manifest lists {name}@{version} twice")]
    DuplicateDependency { name: String, version: String },
    #[error("path {0} is not valid UTF-8")]
    NonUtf8Path(String),
    #[error(transparent)]
    Store(StoreError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<StoreError> for DbsError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(d) => DbsError::UnresolvedInput(d),
            other => DbsError::Store(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Build,
    Test,
    Audit,
}

impl TaskKind {
    pub fn payload_kind(self) -> PayloadKind {
        match self {
            TaskKind::Build => PayloadKind::BuildOutput,
            TaskKind::Test => PayloadKind::TestReport,
            TaskKind::Audit => PayloadKind::AuditReport,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Build => "build",
            TaskKind::Test => "test",
            TaskKind::Audit => "audit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub input_refs: Vec<Digest>,
    /// Deterministic parameters only: no clocks, no unseeded randomness.
    pub params: BTreeMap<String, String>,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, kind: TaskKind, input_refs: Vec<Digest>) -> Self {
        TaskSpec {
            task_id: task_id.into(),
            kind,
            input_refs,
            params: BTreeMap::new(),
        }
    }

    pub fn digest(&self) -> Result<Digest, EncodingError> {
        digest_of(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub pipeline_id: Digest,
    pub tasks: Vec<TaskSpec>,
    /// Reference environment id for each task, same order.
    pub env_refs: Vec<Digest>,
    pub policy_id: Digest,
}

#[derive(Serialize)]
struct PipelineBody<'a> {
    env_refs: &'a [Digest],
    policy_id: &'a Digest,
    tasks: &'a [TaskSpec],
}

#[derive(Debug, thiserror::Error)]
pub enum SpecError {
    #[error("pipeline has {tasks} tasks but {envs} environment references")]
    EnvCount { tasks: usize, envs: usize },
    #[error("pipeline has no tasks")]
    Empty,
    #[error("pipeline id does not recompute")]
    IdMismatch,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

impl PipelineSpec {
    pub fn new(
        tasks: Vec<TaskSpec>,
        env_refs: Vec<Digest>,
        policy_id: Digest,
    ) -> Result<Self, SpecError> {
        let pipeline_id = digest_of(&PipelineBody {
            env_refs: &env_refs,
            policy_id: &policy_id,
            tasks: &tasks,
        })?;
        let spec = PipelineSpec {
            pipeline_id,
            tasks,
            env_refs,
            policy_id,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.tasks.is_empty() {
            return Err(SpecError::Empty);
        }
        if self.tasks.len() != self.env_refs.len() {
            return Err(SpecError::EnvCount {
                tasks: self.tasks.len(),
                envs: self.env_refs.len(),
            });
        }
        let id = digest_of(&PipelineBody {
            env_refs: &self.env_refs,
            policy_id: &self.policy_id,
            tasks: &self.tasks,
        })?;
        if id != self.pipeline_id {
            return Err(SpecError::IdMismatch);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dependency {
    pub name: String,
    pub version: String,
    pub content_digest: Digest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Low => "LOW",
            Severity::Medium => "MEDIUM",
            Severity::High => "HIGH",
            Severity::Critical => "CRITICAL",
        })
    }
}

/// Vulnerability record. Matches a dependency by name within
/// `[introduced, fixed)` (open ends allowed), or by exact content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnRecord {
    pub id: String,
    pub name: String,
    pub introduced: Option<String>,
    pub fixed: Option<String>,
    pub severity: Severity,
    pub content_digest: Option<Digest>,
}

impl VulnRecord {
    pub fn matches(&self, dep: &Dependency) -> bool {
        if self.content_digest == Some(dep.content_digest) {
            return true;
        }
        if self.name != dep.name {
            return false;
        }
        let above = self
            .introduced
            .as_deref()
            .map_or(true, |lo| compare_versions(&dep.version, lo) != Ordering::Less);
        let below = self
            .fixed
            .as_deref()
            .map_or(true, |hi| compare_versions(&dep.version, hi) == Ordering::Less);
        above && below
    }
}

/// Compare dotted versions component-wise; numeric components compare as
/// numbers, anything else as strings. Missing components count as zero.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let split = |s: &str| -> Vec<String> {
        s.split(['.', '-', '+'])
            .map(str::to_string)
            .collect()
    };
    let (xa, xb) = (split(a), split(b));
    for i in 0..xa.len().max(xb.len()) {
        let ca = xa.get(i).map(String::as_str).unwrap_or("0");
        let cb = xb.get(i).map(String::as_str).unwrap_or("0");
        let ord = match (ca.parse::<u64>(), cb.parse::<u64>()) {
            (Ok(na), Ok(nb)) => na.cmp(&nb),
            (Ok(_), Err(_)) => Ordering::Greater,
            (Err(_), Ok(_)) => Ordering::Less,
            (Err(_), Err(_)) => ca.cmp(cb),
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    Ordering::Equal
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCase {
    pub name: String,
    /// File that must exist in the artifact.
    pub path: String,
    /// If set, the file must also have this digest.
    pub expect_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceTree {
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependencyManifest {
    pub entries: Vec<Dependency>,
}

impl DependencyManifest {
    /// Sort by (name, version) and refuse duplicates.
    pub fn new(mut entries: Vec<Dependency>) -> Result<Self, DbsError> {
        entries.sort_by(|a, b| (&a.name, &a.version).cmp(&(&b.name, &b.version)));
        for w in entries.windows(2) {
            if w[0].name == w[1].name && w[0].version == w[1].version {
                return Err(DbsError::DuplicateDependency {
                    name: w[0].name.clone(),
                    version: w[0].version.clone(),
                });
            }
        }
        Ok(DependencyManifest { entries })
    }

    /// Parse a manifest file (any JSON layout) and normalize it.
    pub fn parse(bytes: &[u8]) -> Result<Self, DbsError> {
        let m: DependencyManifest = canonical::parse_relaxed(bytes)?;
        DependencyManifest::new(m.entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnDb {
    pub records: Vec<VulnRecord>,
}

impl VulnDb {
    pub fn parse(bytes: &[u8]) -> Result<Self, DbsError> {
        Ok(canonical::parse_relaxed(bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSuite {
    pub cases: Vec<TestCase>,
}

impl TestSuite {
    pub fn parse(bytes: &[u8]) -> Result<Self, DbsError> {
        Ok(canonical::parse_relaxed(bytes)?)
    }
}

/// The synthesized build product.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub name: String,
    pub source: Digest,
    pub manifest: Option<Digest>,
    pub files: Vec<FileEntry>,
    pub params: BTreeMap<String, String>,
}

/// Every document that lives in a content store under a digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Document {
    SourceTree(SourceTree),
    DependencyManifest(DependencyManifest),
    VulnerabilityDb(VulnDb),
    TestSuite(TestSuite),
    Artifact(Artifact),
}

impl Document {
    pub fn type_name(&self) -> &'static str {
        match self {
            Document::SourceTree(_) => "source-tree",
            Document::DependencyManifest(_) => "dependency-manifest",
            Document::VulnerabilityDb(_) => "vulnerability-db",
            Document::TestSuite(_) => "test-suite",
            Document::Artifact(_) => "artifact",
        }
    }

    pub fn store(&self, store: &ContentStore) -> Result<Digest, DbsError> {
        Ok(store.put(canonical::encode(self)?.as_bytes())?)
    }

    pub fn load(store: &ContentStore, digest: &Digest) -> Result<Document, DbsError> {
        let bytes = store.get(digest)?;
        canonical::decode_exact(&bytes).map_err(|e| DbsError::BadInput {
            digest: *digest,
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildReport {
    pub artifact_digest: Digest,
    pub file_count: u64,
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestReport {
    pub artifact_digest: Digest,
    pub tests_total: u64,
    pub tests_failed: u64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finding {
    pub name: String,
    pub version: String,
    pub vuln_id: String,
    pub severity: Severity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub artifact_digest: Option<Digest>,
    pub manifest_digest: Digest,
    pub dependencies_scanned: u64,
    pub findings: Vec<Finding>,
    pub max_severity: Option<Severity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Report {
    Build(BuildReport),
    Test(TestReport),
    Audit(AuditReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOutput {
    pub task_id: String,
    pub output_kind: PayloadKind,
    pub report: Report,
    /// Declared inputs followed by the predecessor artifact, if any.
    pub inputs: Vec<Digest>,
    pub artifact: Option<Digest>,
    pub output_digest: Digest,
}

/// `H(canonical(report) ‖ input₀ ‖ input₁ ‖ …)`.
pub fn output_digest(report: &Report, inputs: &[Digest]) -> Result<Digest, EncodingError> {
    let enc = canonical::encode(report)?;
    let mut parts: Vec<&[u8]> = vec![enc.as_bytes()];
    parts.extend(inputs.iter().map(|d| d.as_bytes().as_slice()));
    Ok(crypto::hash_parts(&parts))
}

impl TaskOutput {
    /// Bytes stored as the stage's raw evidence payload.
    pub fn payload_bytes(&self) -> Result<Vec<u8>, EncodingError> {
        Ok(canonical::encode(self)?.into_vec())
    }

    pub fn parse(bytes: &[u8]) -> Result<TaskOutput, EncodingError> {
        canonical::decode_exact(bytes)
    }

    pub fn digest_ok(&self) -> bool {
        matches!(output_digest(&self.report, &self.inputs), Ok(d) if d == self.output_digest)
    }
}

/// Find the audit findings for a manifest: every (dependency, record) pair
/// that matches, in manifest order then database order.
pub fn scan(manifest: &DependencyManifest, db: &VulnDb) -> Vec<Finding> {
    manifest
        .entries
        .iter()
        .flat_map(|dep| {
            db.records.iter().filter(|r| r.matches(dep)).map(|r| Finding {
                name: dep.name.clone(),
                version: dep.version.clone(),
                vuln_id: r.id.clone(),
                severity: r.severity,
            })
        })
        .collect()
}

struct Inputs {
    docs: Vec<(Digest, Document)>,
}

impl Inputs {
    fn resolve(store: &ContentStore, refs: &[Digest]) -> Result<Self, DbsError> {
        let docs = refs
            .iter()
            .map(|d| Ok((*d, Document::load(store, d)?)))
            .collect::<Result<Vec<_>, DbsError>>()?;
        Ok(Inputs { docs })
    }

    fn first<T>(&self, pick: impl Fn(&Document) -> Option<&T>) -> Option<(Digest, &T)> {
        self.docs.iter().find_map(|(d, doc)| pick(doc).map(|t| (*d, t)))
    }
}

/// Execute one task deterministically.
///
/// `prev` is the predecessor's actioned evidence; it must be PROCEED. Its
/// `subject` (the artifact so far) is appended to the task's inputs.
pub fn execute(
    task: &TaskSpec,
    prev: &ActionedEvidence,
    store: &ContentStore,
) -> Result<TaskOutput, DbsError> {
    if prev.action != Action::Proceed {
        return Err(DbsError::PreconditionViolated(prev.action));
    }
    let mut inputs = task.input_refs.clone();
    if let Some(a) = prev.raw().subject {
        if !inputs.contains(&a) {
            inputs.push(a);
        }
    }
    let resolved = Inputs::resolve(store, &inputs)?;
    let missing = |needed| DbsError::MissingInput {
        task: task.task_id.clone(),
        needed,
    };

    let (report, artifact) = match task.kind {
        TaskKind::Build => {
            let (src_digest, tree) = resolved
                .first(|d| match d {
                    Document::SourceTree(t) => Some(t),
                    _ => None,
                })
                .ok_or_else(|| missing("source-tree"))?;
            let manifest = resolved
                .first(|d| match d {
                    Document::DependencyManifest(m) => Some(m),
                    _ => None,
                })
                .map(|(d, _)| d);
            let artifact = Document::Artifact(Artifact {
                name: task.params.get("artifact").cloned().unwrap_or_else(|| task.task_id.clone()),
                source: src_digest,
                manifest,
                files: tree.files.clone(),
                params: task.params.clone(),
            });
            let artifact_digest = artifact.store(store)?;
            let mut log = vec![format!("source {src_digest}"), format!("files {}", tree.files.len())];
            if let Some(m) = manifest {
                log.push(format!("manifest {m}"));
            }
            log.push(format!("artifact {artifact_digest}"));
            let report = Report::Build(BuildReport {
                artifact_digest,
                file_count: tree.files.len() as u64,
                log,
            });
            (report, Some(artifact_digest))
        }
        TaskKind::Test => {
            let (artifact_digest, artifact) = resolved
                .first(|d| match d {
                    Document::Artifact(a) => Some(a),
                    _ => None,
                })
                .ok_or_else(|| missing("artifact"))?;
            let (_, suite) = resolved
                .first(|d| match d {
                    Document::TestSuite(s) => Some(s),
                    _ => None,
                })
                .ok_or_else(|| missing("test-suite"))?;
            let files: BTreeMap<&str, &Digest> =
                artifact.files.iter().map(|f| (f.path.as_str(), &f.digest)).collect();
            let failures: Vec<String> = suite
                .cases
                .iter()
                .filter(|c| match files.get(c.path.as_str()) {
                    None => true,
                    Some(d) => c.expect_digest.is_some_and(|e| e != **d),
                })
                .map(|c| c.name.clone())
                .collect();
            let report = Report::Test(TestReport {
                artifact_digest,
                tests_total: suite.cases.len() as u64,
                tests_failed: failures.len() as u64,
                failures,
            });
            (report, Some(artifact_digest))
        }
        TaskKind::Audit => {
            let (manifest_digest, manifest) = resolved
                .first(|d| match d {
                    Document::DependencyManifest(m) => Some(m),
                    _ => None,
                })
                .ok_or_else(|| missing("dependency-manifest"))?;
            let (_, db) = resolved
                .first(|d| match d {
                    Document::VulnerabilityDb(v) => Some(v),
                    _ => None,
                })
                .ok_or_else(|| missing("vulnerability-db"))?;
            let artifact_digest = resolved
                .first(|d| match d {
                    Document::Artifact(a) => Some(a),
                    _ => None,
                })
                .map(|(d, _)| d);
            let findings = scan(manifest, db);
            let max_severity = findings.iter().map(|f| f.severity).max();
            let report = Report::Audit(AuditReport {
                artifact_digest,
                manifest_digest,
                dependencies_scanned: manifest.entries.len() as u64,
                findings,
                max_severity,
            });
            (report, artifact_digest)
        }
    };
    let output_digest = output_digest(&report, &inputs)?;
    Ok(TaskOutput {
        task_id: task.task_id.clone(),
        output_kind: task.kind.payload_kind(),
        report,
        inputs,
        artifact,
        output_digest,
    })
}

/// Content-address a set of (relative path, bytes) files as a source tree.
pub fn ingest_files<'a, I>(files: I, store: &ContentStore) -> Result<Digest, DbsError>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
{
    let mut entries = Vec::new();
    for (path, bytes) in files {
        entries.push(FileEntry {
            path: path.to_string(),
            digest: store.put(bytes)?,
        });
    }
    entries.sort();
    entries.dedup_by(|a, b| a.path == b.path);
    Document::SourceTree(SourceTree { files: entries }).store(store)
}

/// Content-address a directory tree. Paths are relative, `/`-separated and
/// sorted, so traversal order does not matter.
pub fn ingest_source(dir: &Path, store: &ContentStore) -> Result<Digest, DbsError> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    walk(dir, dir, &mut files)?;
    ingest_files(files.iter().map(|(p, b)| (p.as_str(), b.as_slice())), store)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<(), DbsError> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let ty = entry.file_type()?;
        if ty.is_dir() {
            walk(root, &path, out)?;
        } else if ty.is_file() {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel
                .components()
                .map(|c| {
                    c.as_os_str()
                        .to_str()
                        .map(str::to_string)
                        .ok_or_else(|| DbsError::NonUtf8Path(rel.display().to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?
                .join("/");
            out.push((rel, fs::read(&path)?));
        }
    }
    Ok(())
}

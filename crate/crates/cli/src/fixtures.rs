//! Scenario fixtures. The checked-in set under `fixtures/` is compiled in;
//! a directory with the same layout can be loaded instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustci_core::canonical;
use trustci_core::dbs::{DependencyManifest, Severity, TestSuite, VulnDb};
use trustci_core::producer::{Inputs, ProducerConfig, TaskTemplate};
use trustci_core::tee::Labels;

use crate::scaling::CostTable;

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture {0} is missing")]
    Missing(PathBuf),
    #[error("fixture {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

/// Pipeline configuration file. Input paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub tasks: Vec<TaskTemplate>,
    #[serde(default)]
    pub labels: Labels,
    pub max_severity: Severity,
    pub manifest: Option<String>,
    pub vulndb: Option<String>,
    pub tests: Option<String>,
    /// Optional policy file; the standard policy is used otherwise.
    #[serde(default)]
    pub policy: Option<String>,
}

pub const PIPELINE_SCHEMA_EXAMPLE: &str = r#"{
  "tasks": [
    {"task_id": "build", "kind": "build", "inputs": ["source", "manifest"]},
    {"task_id": "test",  "kind": "test",  "inputs": ["tests"]},
    {"task_id": "audit", "kind": "audit", "inputs": ["manifest", "vuln-db"]}
  ],
  "labels": {"image": "builder:1"},
  "max_severity": "MEDIUM",
  "manifest": "manifest.json",
  "vulndb": "vulndb.json",
  "tests": "tests.json",
  "policy": null
}"#;

#[derive(Debug, Clone)]
pub struct FixtureSet {
    pub source: Vec<(String, Vec<u8>)>,
    pub pipeline: PipelineConfig,
    pub manifest: DependencyManifest,
    pub manifest_vulnerable: DependencyManifest,
    pub vulndb: VulnDb,
    pub tests: TestSuite,
    pub costs: CostTable,
}

const SOURCE: &[(&str, &[u8])] = &[
    ("Cargo.toml", include_bytes!("../fixtures/source/Cargo.toml")),
    ("README.md", include_bytes!("../fixtures/source/README.md")),
    ("src/feed.rs", include_bytes!("../fixtures/source/src/feed.rs")),
    ("src/main.rs", include_bytes!("../fixtures/source/src/main.rs")),
];

const FILES: &[(&str, &str)] = &[
    ("pipeline.json", include_str!("../fixtures/pipeline.json")),
    ("manifest.json", include_str!("../fixtures/manifest.json")),
    ("manifest-vulnerable.json", include_str!("../fixtures/manifest-vulnerable.json")),
    ("vulndb.json", include_str!("../fixtures/vulndb.json")),
    ("tests.json", include_str!("../fixtures/tests.json")),
    ("costs.json", include_str!("../fixtures/costs.json")),
];

fn parse<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T, FixtureError> {
    canonical::parse_relaxed(bytes).map_err(|e| FixtureError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_manifest(path: &Path, bytes: &[u8]) -> Result<DependencyManifest, FixtureError> {
    DependencyManifest::parse(bytes).map_err(|e| FixtureError::Invalid {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl FixtureSet {
    fn from_files(
        source: Vec<(String, Vec<u8>)>,
        get: impl Fn(&str) -> Result<(PathBuf, Vec<u8>), FixtureError>,
    ) -> Result<Self, FixtureError> {
        let (p, b) = get("pipeline.json")?;
        let pipeline: PipelineConfig = parse(&p, &b)?;
        let (p, b) = get("manifest.json")?;
        let manifest = load_manifest(&p, &b)?;
        let (p, b) = get("manifest-vulnerable.json")?;
        let manifest_vulnerable = load_manifest(&p, &b)?;
        let (p, b) = get("vulndb.json")?;
        let vulndb = parse(&p, &b)?;
        let (p, b) = get("tests.json")?;
        let tests = parse(&p, &b)?;
        let (p, b) = get("costs.json")?;
        let costs = CostTable::parse(&b).map_err(|e| FixtureError::Invalid {
            path: p,
            reason: e.to_string(),
        })?;
        Ok(FixtureSet {
            source,
            pipeline,
            manifest,
            manifest_vulnerable,
            vulndb,
            tests,
            costs,
        })
    }

    /// The compiled-in fixture set.
    pub fn embedded() -> Self {
        let files: BTreeMap<&str, &str> = FILES.iter().copied().collect();
        let source = SOURCE.iter().map(|(p, b)| (p.to_string(), b.to_vec())).collect();
        FixtureSet::from_files(source, |name| {
            let text = files.get(name).ok_or_else(|| FixtureError::Missing(name.into()))?;
            Ok((PathBuf::from(name), text.as_bytes().to_vec()))
        })
        .expect("embedded fixtures are valid")
    }

    /// Load a fixture directory: the JSON files at its top level and the
    /// source tree under `source/`.
    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let src_dir = dir.join("source");
        if !src_dir.is_dir() {
            return Err(FixtureError::Missing(src_dir));
        }
        let source = read_tree(&src_dir)?;
        FixtureSet::from_files(source, |name| {
            let path = dir.join(name);
            match fs::read(&path) {
                Ok(b) => Ok((path, b)),
                Err(_) => Err(FixtureError::Missing(path)),
            }
        })
    }

    pub fn inputs(&self, vulnerable: bool) -> Inputs {
        Inputs {
            source: self.source.clone(),
            manifest: Some(if vulnerable {
                self.manifest_vulnerable.clone()
            } else {
                self.manifest.clone()
            }),
            vulndb: Some(self.vulndb.clone()),
            tests: Some(self.tests.clone()),
        }
    }

    pub fn producer_config(&self, vulnerable: bool) -> ProducerConfig {
        ProducerConfig {
            inputs: self.inputs(vulnerable),
            tasks: self.pipeline.tasks.clone(),
            labels: self.pipeline.labels.clone(),
            max_severity: self.pipeline.max_severity,
        }
    }
}

/// Every file under `dir` keyed by its `/`-separated relative path, sorted.
pub fn read_tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, FixtureError> {
    let mut out = Vec::new();
    collect(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> Result<(), FixtureError> {
    let invalid = |reason: String| FixtureError::Invalid {
        path: dir.to_path_buf(),
        reason,
    };
    for entry in fs::read_dir(dir).map_err(|e| invalid(e.to_string()))? {
        let entry = entry.map_err(|e| invalid(e.to_string()))?;
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            out.push((rel, fs::read(&path).map_err(|e| invalid(e.to_string()))?));
        }
    }
    Ok(())
}

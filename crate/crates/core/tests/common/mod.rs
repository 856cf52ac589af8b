#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use trustci_core::bundle::Bundle;
use trustci_core::crypto::hash;
use trustci_core::dbs::{Dependency, DependencyManifest, Severity, TestCase, TestSuite, VulnDb, VulnRecord};
use trustci_core::engine::{PipelineRun, RunOptions};
use trustci_core::producer::{Inputs, Producer, ProducerConfig};

pub fn dep(name: &str, version: &str) -> Dependency {
    Dependency {
        name: name.into(),
        version: version.into(),
        content_digest: hash(format!("{name}@{version}").as_bytes()),
    }
}

pub fn inputs() -> Inputs {
    Inputs {
        source: vec![
            ("src/lib.rs".into(), b"pub fn answer() -> u32 { 42 }".to_vec()),
            ("Cargo.toml".into(), b"[package]\nname = \"demo\"".to_vec()),
        ],
        manifest: Some(DependencyManifest::new(vec![dep("serde", "1.0.200"), dep("log", "0.4.21")]).unwrap()),
        vulndb: Some(VulnDb {
            records: vec![VulnRecord {
                id: "GHSA-0001".into(),
                name: "log".into(),
                introduced: Some("0.3.0".into()),
                fixed: Some("0.4.0".into()),
                severity: Severity::Critical,
                content_digest: None,
            }],
        }),
        tests: Some(TestSuite {
            cases: vec![TestCase {
                name: "has-lib".into(),
                path: "src/lib.rs".into(),
                expect_digest: Some(hash(b"pub fn answer() -> u32 { 42 }")),
            }],
        }),
    }
}

pub fn clean_run(seed: u64, cfg: &ProducerConfig) -> (Producer, PipelineRun, Bundle) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut p = Producer::new(cfg, &mut rng).unwrap();
    let run = p.run(format!("push #{seed}").as_bytes(), &RunOptions::default(), &mut rng);
    assert!(run.completed(), "{}", run.status);
    let b = run.bundle().unwrap();
    (p, run, b)
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trustci_core::bundle::RunManifest;

fn trustci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustci"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn setup() -> (tempfile::TempDir, String, String) {
    let d = tempfile::tempdir().unwrap();
    let state = d.path().join("state").to_str().unwrap().to_string();
    let out = d.path().join("out").to_str().unwrap().to_string();
    assert_eq!(code(&trustci(&["keygen", "--state", &state, "--seed", "3"])), 0);
    (d, state, out)
}

fn run(state: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = fixtures().join("pipeline.json");
    let mut args = vec!["run", "--state", state, "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "9"];
    args.extend_from_slice(extra);
    trustci(&args)
}

#[test]
fn run_verify_audit_then_revoke() {
    let (_d, state, out) = setup();
    let o = run(&state, &out, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = RunManifest::parse(&std::fs::read(Path::new(&out).join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.completed());
    assert_eq!(manifest.stages.len(), 4);

    let v = trustci(&["verify", "--state", &state, "--run", &out]);
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stdout));
    let a = trustci(&["audit", "--state", &state, "--run", &out, "--json"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stdout));
    assert!(String::from_utf8_lossy(&a.stdout).contains("\"pass\":true"));

    let wrong = trustci(&["verify", "--state", &state, "--run", &out, "--artifact", &"ab".repeat(32)]);
    assert_eq!(code(&wrong), 1);

    let idx = manifest.final_commitment_index.unwrap().to_string();
    assert_eq!(code(&trustci(&["revoke", "--state", &state, "--index", &idx])), 0);
    let v = trustci(&["verify", "--state", &state, "--run", &out]);
    assert_eq!(code(&v), 1);
    assert!(String::from_utf8_lossy(&v.stdout).contains("FAIL"));
}

#[test]
fn tampered_run_exits_1_without_bundle() {
    let (_d, state, out) = setup();
    let o = run(&state, &out, &["--tamper-stage", "2"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Stage 2 Attestation"));
    assert!(!Path::new(&out).join("bundle.jsonl").exists());
    assert_eq!(code(&trustci(&["verify", "--state", &state, "--run", &out])), 1);
}

#[test]
fn run_without_keys_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let s = d.path().to_str().unwrap();
    assert_eq!(code(&run(s, s, &[])), 2);
}

#[test]
fn scenario_s3_detects() {
    let d = tempfile::tempdir().unwrap();
    let o = trustci(&["simulate-scenario", "s3", "--workspace", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("\"detected\":true"), "{stdout}");
}

#[test]
fn scenarios_s1_s2_pass_on_directory_fixtures() {
    for kind in ["s1", "s2"] {
        let o = trustci(&["simulate-scenario", kind, "--fixtures", fixtures().to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{kind}: {}", String::from_utf8_lossy(&o.stdout));
    }
    let d = tempfile::tempdir().unwrap();
    let o = trustci(&["simulate-scenario", "s1", "--fixtures", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn scaling_writes_csv_and_svg() {
    let d = tempfile::tempdir().unwrap();
    let csv = d.path().join("c.csv");
    let svg = d.path().join("c.svg");
    let o = trustci(&[
        "simulate-scaling",
        "--use-case",
        "Backend Service",
        "--csv",
        csv.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("untrusted 7121.40 min, trusted 199.04 min"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 13);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

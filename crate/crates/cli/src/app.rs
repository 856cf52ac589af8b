//! Command-line interface.
//!
//! A state directory holds what a producer and its consumers share:
//!
//! ```text
//! producer.keys     actor and manufacturer-root key pairs (private)
//! trusted.keys      public keys, including every enclave key ever launched
//! envs.jsonl        reference environments
//! policies/<id>.json
//! ledger.jsonl
//! registry/
//! ```
//!
//! `run` writes `bundle.jsonl` and `manifest.json` into its output directory.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use trustci_core::bundle::{Bundle, RunManifest};
use trustci_core::canonical;
use trustci_core::crypto::{keygen_with, Digest, KeyRecord, KeyRole, Keystore};
use trustci_core::dbs::{DependencyManifest, TestSuite, VulnDb};
use trustci_core::engine::RunOptions;
use trustci_core::ledger::{parse_entries, Ledger};
use trustci_core::policy::{load_policy_file, Policy};
use trustci_core::producer::{build_spec, Inputs, Producer, ProducerConfig};
use trustci_core::registry::Registry;
use trustci_core::tee::EnvSet;
use trustci_core::verifier::{full_audit_bytes, quick_verify_with_ledger};

use crate::fixtures::{read_tree, FixtureSet, PipelineConfig, PIPELINE_SCHEMA_EXAMPLE};
use crate::scaling::{simulate_scaling, CostTable, Growth, Metric, ScalingScenario};
use crate::scenario::{simulate_scenario, ScenarioKind};

const PRODUCER_KEYS: &str = "producer.keys";
const TRUSTED_KEYS: &str = "trusted.keys";
const ENVS: &str = "envs.jsonl";
const POLICIES: &str = "policies";
const LEDGER: &str = "ledger.jsonl";
const REGISTRY: &str = "registry";
const BUNDLE: &str = "bundle.jsonl";
const MANIFEST: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "trustci", version, about = "Evidence-chained CI pipelines with simulated enclaves and a commitment ledger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create producer keys in a state directory.
    Keygen {
        #[arg(long)]
        state: PathBuf,
        /// Derive keys from a seed instead of the OS RNG.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace existing keys.
        #[arg(long)]
        force: bool,
    },
    /// Run a pipeline and write its bundle and manifest.
    Run {
        #[arg(long)]
        state: PathBuf,
        /// Pipeline config (JSON); input paths are relative to it.
        #[arg(long)]
        config: PathBuf,
        /// Source tree; defaults to `source/` next to the config.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Policy file; overrides the config and the standard policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "manual run")]
        trigger: String,
        #[arg(long, default_value_t = 0)]
        timestamp: i64,
        #[arg(long)]
        seed: Option<u64>,
        /// Launch this stage's enclave tampered.
        #[arg(long)]
        tamper_stage: Option<u64>,
    },
    /// Quick verification of a run's artifact against the ledger.
    Verify {
        #[arg(long)]
        state: PathBuf,
        /// Output directory of `run`.
        #[arg(long)]
        run: PathBuf,
        /// Artifact digest to check; defaults to the one in the manifest.
        #[arg(long)]
        artifact: Option<Digest>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Full audit of a run's bundle.
    Audit {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Revoke a ledger commitment.
    Revoke {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        index: u64,
        #[arg(long, default_value = "revoked by operator")]
        reason: String,
    },
    /// Run one of the threat scenarios and print its report.
    SimulateScenario {
        kind: ScenarioKind,
        /// Fixture directory; the built-in fixtures otherwise.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Scratch directory for file-backed scenarios.
        #[arg(long)]
        workspace: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cumulative cost of consumer rebuilds versus verification.
    SimulateScaling {
        /// Scenario file (JSON); flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cost table; the built-in one otherwise.
        #[arg(long)]
        costs: Option<PathBuf>,
        #[arg(long)]
        months: Option<u32>,
        #[arg(long)]
        growth: Option<u64>,
        #[arg(long)]
        releases: Option<u64>,
        #[arg(long)]
        use_case: Option<String>,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<Metric>,
        /// Multiply consumers by the growth factor each month.
        #[arg(long)]
        geometric: bool,
        /// Consumers handle every release so far, not just the new ones.
        #[arg(long)]
        back_catalog: bool,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s {
        "time" => Ok(Metric::Time),
        "cpu" => Ok(Metric::Cpu),
        "mem" => Ok(Metric::Mem),
        _ => Err(format!("unknown metric `{s}` (time, cpu, mem)")),
    }
}

/// A failed command: the exit code, a message and optional help text.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub help: Option<&'static str>,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
            help: None,
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_FAIL,
            message: message.into(),
            help: None,
        }
    }

    fn with_help(mut self, help: &'static str) -> Self {
        self.help = Some(help);
        self
    }
}

type CmdResult = Result<i32, Failure>;

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::failed(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::failed(format!("{}: {e}", path.display())))
}

fn rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

fn load_keystore(path: &Path) -> Result<Keystore, Failure> {
    Keystore::parse(&read(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_envs(state: &Path) -> Result<EnvSet, Failure> {
    let path = state.join(ENVS);
    if !path.exists() {
        return Ok(EnvSet::new());
    }
    EnvSet::parse(&read(&path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn policy_path(state: &Path, id: &Digest) -> PathBuf {
    state.join(POLICIES).join(format!("{id}.json"))
}

fn keygen(state: &Path, seed: Option<u64>, force: bool, out: &mut dyn Write) -> CmdResult {
    let keys = state.join(PRODUCER_KEYS);
    if keys.exists() && !force {
        return Err(Failure::usage(format!("{} exists; pass --force to replace it", keys.display())));
    }
    let mut rng = rng(seed);
    let gen = |role, rng: &mut ChaCha20Rng| {
        keygen_with(role, None, rng).map_err(|e| Failure::failed(e.to_string()))
    };
    let actor = gen(KeyRole::Actor, &mut rng)?;
    let root = gen(KeyRole::ManufacturerRoot, &mut rng)?;
    let private: Keystore = [actor.clone(), root.clone()].into_iter().collect();
    let public = private.public_only();
    let lines = |ks: &Keystore| ks.to_lines().map_err(|e| Failure::failed(e.to_string()));
    write(&keys, &lines(&private)?)?;
    write(&state.join(TRUSTED_KEYS), &lines(&public)?)?;
    let _ = writeln!(out, "actor {}", actor.key_id);
    let _ = writeln!(out, "manufacturer-root {}", root.key_id);
    Ok(EXIT_OK)
}

fn producer_keys(state: &Path) -> Result<(KeyRecord, KeyRecord), Failure> {
    let ks = load_keystore(&state.join(PRODUCER_KEYS))
        .map_err(|f| Failure::usage(format!("{}; run `trustci keygen` first", f.message)))?;
    let find = |role| {
        ks.iter()
            .find(|k| k.role == role && k.has_private())
            .cloned()
            .ok_or_else(|| Failure::usage(format!("{PRODUCER_KEYS} has no private {role} key")))
    };
    Ok((find(KeyRole::Actor)?, find(KeyRole::ManufacturerRoot)?))
}

fn load_inputs(config_path: &Path, source: Option<&Path>) -> Result<(PipelineConfig, Inputs), Failure> {
    let schema = |f: Failure| f.with_help(PIPELINE_SCHEMA_EXAMPLE);
    let cfg: PipelineConfig = canonical::parse_relaxed(&read(config_path)?)
        .map_err(|e| schema(Failure::usage(format!("{}: {e}", config_path.display()))))?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let src = source.map(Path::to_path_buf).unwrap_or_else(|| base.join("source"));
    if !src.is_dir() {
        return Err(Failure::usage(format!("source directory {} not found", src.display())));
    }
    let source = read_tree(&src).map_err(|e| Failure::usage(e.to_string()))?;
    fn doc<T>(
        base: &Path,
        rel: &Option<String>,
        parse: impl Fn(&[u8]) -> Result<T, trustci_core::dbs::DbsError>,
    ) -> Result<Option<T>, Failure> {
        let Some(rel) = rel else { return Ok(None) };
        let path = base.join(rel);
        parse(&read(&path)?)
            .map(Some)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }
    let inputs = Inputs {
        source,
        manifest: doc(base, &cfg.manifest, DependencyManifest::parse)?,
        vulndb: doc(base, &cfg.vulndb, VulnDb::parse)?,
        tests: doc(base, &cfg.tests, TestSuite::parse)?,
    };
    Ok((cfg, inputs))
}

#[allow(clippy::too_many_arguments)]
fn run(
    state: &Path,
    config: &Path,
    source: Option<&Path>,
    policy: Option<&Path>,
    out_dir: &Path,
    trigger: &str,
    opts: RunOptions,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> CmdResult {
    let (actor, root) = producer_keys(state)?;
    let (cfg, inputs) = load_inputs(config, source)?;
    let policy_file = policy
        .map(Path::to_path_buf)
        .or_else(|| cfg.policy.as_ref().map(|p| config.parent().unwrap_or(Path::new(".")).join(p)));
    let custom: Option<Policy> = policy_file
        .map(|p| load_policy_file(&p).map_err(|e| Failure::usage(format!("{}: {e}", p.display()))))
        .transpose()?;
    let pcfg = ProducerConfig {
        inputs,
        tasks: cfg.tasks.clone(),
        labels: cfg.labels.clone(),
        max_severity: cfg.max_severity,
    };
    let ledger = Ledger::open(state.join(LEDGER)).map_err(|e| Failure::failed(format!("ledger: {e}")))?;
    let registry = Registry::open(state.join(REGISTRY)).map_err(|e| Failure::failed(format!("registry: {e}")))?;
    let root_id = root.key_id;
    let mut p = Producer::with_keys(&pcfg, actor, root, registry, ledger)
        .map_err(|e| Failure::usage(e.to_string()).with_help(PIPELINE_SCHEMA_EXAMPLE))?;
    if let Some(policy) = custom {
        let (spec, envs) = build_spec(&pcfg.tasks, &p.inputs, &pcfg.labels, &[root_id], policy.policy_id)
            .map_err(|e| Failure::usage(e.to_string()))?;
        p.spec = spec;
        p.envs = envs;
        p.policy = policy;
    }

    let mut rng = rng(seed);
    let run = p.run(trigger.as_bytes(), &opts, &mut rng);

    // Publish trust configuration for consumers.
    let mut trusted = match state.join(TRUSTED_KEYS).exists() {
        true => load_keystore(&state.join(TRUSTED_KEYS))?,
        false => Keystore::new(),
    };
    for k in p.keystore.iter() {
        trusted.insert(k.public_only());
    }
    let fail = |e: &dyn std::fmt::Display| Failure::failed(e.to_string());
    write(&state.join(TRUSTED_KEYS), &trusted.to_lines().map_err(|e| fail(&e))?)?;
    let mut envs = load_envs(state)?;
    envs.extend(p.envs.iter().cloned());
    write(&state.join(ENVS), &envs.to_lines().map_err(|e| fail(&e))?)?;
    write(
        &policy_path(state, &p.policy.policy_id),
        &p.policy.to_canonical().map_err(|e| fail(&e))?,
    )?;

    let head = p.ledger.lock().expect("ledger lock poisoned").head();
    let manifest = run.manifest(head).map_err(|e| fail(&e))?;
    if let Some(b) = run.bundle() {
        write(&out_dir.join(BUNDLE), &b.to_bytes().map_err(|e| fail(&e))?)?;
    }
    write(&out_dir.join(MANIFEST), &manifest.to_bytes().map_err(|e| fail(&e))?)?;
    let _ = writeln!(out, "{}", run.status);
    if let Some(a) = manifest.artifact_digest {
        let _ = writeln!(out, "artifact {a}");
    }
    let _ = writeln!(out, "manifest {}", out_dir.join(MANIFEST).display());
    Ok(if run.completed() { EXIT_OK } else { EXIT_FAIL })
}

/// Manifest and bundle of a completed run.
fn load_run(run_dir: &Path) -> Result<(RunManifest, Vec<u8>), Failure> {
    let manifest_path = run_dir.join(MANIFEST);
    let manifest = RunManifest::parse(&read(&manifest_path)?)
        .map_err(|e| Failure::failed(format!("{}: {e}", manifest_path.display())))?;
    if !manifest.completed() {
        return Err(Failure::failed(format!(
            "run did not complete: {}",
            manifest.label.as_deref().unwrap_or("aborted")
        )));
    }
    let bundle = read(&run_dir.join(BUNDLE))?;
    if !manifest.bundle_matches(&bundle) {
        return Err(Failure::failed("bundle does not match the run manifest"));
    }
    Ok((manifest, bundle))
}

fn print_report(out: &mut dyn Write, report: &trustci_core::verifier::VerificationReport, json: bool) {
    if json {
        match canonical::encode(report) {
            Ok(b) => {
                let _ = out.write_all(b.as_bytes());
                let _ = writeln!(out);
            }
            Err(e) => {
                let _ = writeln!(out, "report encoding failed: {e}");
            }
        }
    } else {
        let _ = write!(out, "{report}");
    }
}

fn verify(state: &Path, run_dir: &Path, artifact: Option<Digest>, json: bool, out: &mut dyn Write) -> CmdResult {
    let keystore = load_keystore(&state.join(TRUSTED_KEYS))?;
    let envs = load_envs(state)?;
    let (manifest, bundle) = load_run(run_dir)?;
    let bundle = Bundle::parse(&bundle).map_err(|e| Failure::failed(format!("bundle: {e}")))?;
    let ledger = Ledger::open(state.join(LEDGER)).map_err(|e| Failure::failed(format!("ledger: {e}")))?;
    let artifact = artifact
        .or(manifest.artifact_digest)
        .ok_or_else(|| Failure::failed("run produced no artifact"))?;
    let final_act = bundle.final_actioned().expect("parsed bundles are non-empty");
    let report = quick_verify_with_ledger(artifact, final_act, &ledger, manifest.policy_id, &keystore, &envs);
    print_report(out, &report, json);
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

fn audit(state: &Path, run_dir: &Path, json: bool, out: &mut dyn Write) -> CmdResult {
    let keystore = load_keystore(&state.join(TRUSTED_KEYS))?;
    let envs = load_envs(state)?;
    let (manifest, bundle) = load_run(run_dir)?;
    let ppath = policy_path(state, &manifest.policy_id);
    let policy = load_policy_file(&ppath).map_err(|e| Failure::failed(format!("{}: {e}", ppath.display())))?;
    let ledger_bytes = read(&state.join(LEDGER))?;
    let (entries, err) = parse_entries(&ledger_bytes);
    if let Some((idx, e)) = err {
        return Err(Failure::failed(format!("ledger entry {idx} is malformed: {e}")));
    }
    let report = full_audit_bytes(&bundle, &entries, &policy, &keystore, &envs)
        .map_err(|e| Failure::failed(format!("bundle: {e}")))?;
    print_report(out, &report, json);
    Ok(if report.pass { EXIT_OK } else { EXIT_FAIL })
}

fn revoke(state: &Path, index: u64, reason: &str, out: &mut dyn Write) -> CmdResult {
    let mut ledger = Ledger::open(state.join(LEDGER)).map_err(|e| Failure::failed(format!("ledger: {e}")))?;
    let e = ledger
        .revoke_index(index, reason)
        .map_err(|e| Failure::failed(format!("revoke: {e}")))?;
    let _ = writeln!(out, "revocation {} of commitment {index}", e.index);
    Ok(EXIT_OK)
}

fn scenario(
    kind: ScenarioKind,
    fixtures: Option<&Path>,
    workspace: Option<&Path>,
    seed: u64,
    report: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let set = match fixtures {
        Some(dir) => FixtureSet::load(dir).map_err(|e| Failure::usage(e.to_string()))?,
        None => FixtureSet::embedded(),
    };
    let ws = workspace
        .map(Path::to_path_buf)
        .unwrap_or_else(|| std::env::temp_dir().join("trustci"));
    let r = simulate_scenario(kind, &set, &ws, seed).map_err(|e| Failure::failed(e.to_string()))?;
    let json = r.to_json().map_err(|e| Failure::failed(e.to_string()))?;
    let _ = writeln!(out, "{json}");
    if let Some(path) = report {
        write(path, format!("{json}\n").as_bytes())?;
    }
    Ok(if r.pass { EXIT_OK } else { EXIT_FAIL })
}

#[allow(clippy::too_many_arguments)]
fn scaling(
    config: Option<&Path>,
    costs: Option<&Path>,
    months: Option<u32>,
    growth: Option<u64>,
    releases: Option<u64>,
    use_case: Option<String>,
    metric: Option<Metric>,
    geometric: bool,
    back_catalog: bool,
    csv: Option<&Path>,
    svg: Option<&Path>,
    out: &mut dyn Write,
) -> CmdResult {
    let mut s: ScalingScenario = match config {
        Some(p) => canonical::parse_relaxed(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => ScalingScenario::default(),
    };
    s.months = months.unwrap_or(s.months);
    s.consumer_growth_per_month = growth.unwrap_or(s.consumer_growth_per_month);
    s.releases_per_month = releases.unwrap_or(s.releases_per_month);
    s.use_case = use_case.unwrap_or(s.use_case);
    s.metric = metric.unwrap_or(s.metric);
    if geometric {
        s.growth = Growth::Geometric;
    }
    s.back_catalog |= back_catalog;
    let table = match costs {
        Some(p) => CostTable::parse(&read(p)?).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => FixtureSet::embedded().costs,
    };
    let curves = simulate_scaling(&s, &table).map_err(|e| Failure::usage(e.to_string()))?;
    match csv {
        Some(p) => write(p, curves.to_csv().as_bytes())?,
        None => {
            let _ = out.write_all(curves.to_csv().as_bytes());
        }
    }
    if let Some(p) = svg {
        write(p, curves.to_svg().as_bytes())?;
    }
    let last = curves.last();
    let summary = format!(
        "{} over {} months: untrusted {:.2} {unit}, trusted {:.2} {unit}, crossover month {}",
        s.use_case,
        s.months,
        last.untrusted_cum,
        last.trusted_cum,
        curves.crossover_month.map_or("none".to_string(), |m| m.to_string()),
        unit = curves.unit,
    );
    // Keep stdout pure CSV when it carries the curves.
    if csv.is_some() {
        let _ = writeln!(out, "{summary}");
    } else {
        log::info!("{summary}");
    }
    Ok(EXIT_OK)
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Keygen { state, seed, force } => keygen(&state, seed, force, out),
        Command::Run {
            state,
            config,
            source,
            policy,
            out: out_dir,
            trigger,
            timestamp,
            seed,
            tamper_stage,
        } => run(
            &state,
            &config,
            source.as_deref(),
            policy.as_deref(),
            &out_dir,
            &trigger,
            RunOptions { timestamp, tamper_stage },
            seed,
            out,
        ),
        Command::Verify {
            state,
            run,
            artifact,
            json,
        } => verify(&state, &run, artifact, json, out),
        Command::Audit { state, run, json } => audit(&state, &run, json, out),
        Command::Revoke { state, index, reason } => revoke(&state, index, &reason, out),
        Command::SimulateScenario {
            kind,
            fixtures,
            workspace,
            seed,
            report,
        } => scenario(kind, fixtures.as_deref(), workspace.as_deref(), seed, report.as_deref(), out),
        Command::SimulateScaling {
            config,
            costs,
            months,
            growth,
            releases,
            use_case,
            metric,
            geometric,
            back_catalog,
            csv,
            svg,
        } => scaling(
            config.as_deref(),
            costs.as_deref(),
            months,
            growth,
            releases,
            use_case,
            metric,
            geometric,
            back_catalog,
            csv.as_deref(),
            svg.as_deref(),
            out,
        ),
    }
}

/// Parse `args` (including the program name) and run the command. Returns
/// the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            if let Some(help) = f.help {
                let _ = writeln!(err, "expected a pipeline config like:\n{help}");
            }
            f.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(std::iter::once("trustci").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(call(&[]).0, EXIT_USAGE);
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(call(&["simulate-scenario", "s9"]).0, EXIT_USAGE);
        assert_eq!(call(&["simulate-scaling", "--metric", "watts"]).0, EXIT_USAGE);
        assert_eq!(call(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn bad_pipeline_config_prints_schema() {
        let d = tempfile::tempdir().unwrap();
        let s = d.path().to_str().unwrap();
        assert_eq!(call(&["keygen", "--state", s, "--seed", "1"]).0, EXIT_OK);
        let cfg = d.path().join("pipeline.json");
        fs::write(&cfg, br#"{"stages": []}"#).unwrap();
        let (code, _, err) = call(&["run", "--state", s, "--config", cfg.to_str().unwrap(), "--out", s]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("\"max_severity\""), "{err}");
    }

    #[test]
    fn keygen_refuses_to_overwrite() {
        let d = tempfile::tempdir().unwrap();
        let s = d.path().to_str().unwrap();
        assert_eq!(call(&["keygen", "--state", s, "--seed", "1"]).0, EXIT_OK);
        assert_eq!(call(&["keygen", "--state", s]).0, EXIT_USAGE);
        assert_eq!(call(&["keygen", "--state", s, "--force"]).0, EXIT_OK);
        let ks = Keystore::load(&d.path().join(TRUSTED_KEYS)).unwrap();
        assert!(ks.iter().all(|k| !k.has_private()));
    }

    #[test]
    fn scaling_to_stdout_is_csv() {
        let (code, out, _) = call(&["simulate-scaling", "--months", "3"]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.lines().count(), 4);
        assert!(out.starts_with("month,"));
    }

    #[test]
    fn scaling_rejects_unknown_use_case() {
        assert_eq!(call(&["simulate-scaling", "--use-case", "mainframe"]).0, EXIT_USAGE);
    }
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nas-tc"));
    c.env_remove("NAS_TC_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn manifest(p: &Path) -> Value {
    let mut name = p.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    read_json(&p.with_file_name(name))
}

const TINY_SPEC: &str = r#"{"classes": 2, "samples_per_class": 16, "channels": 6, "timesteps": 8, "noise": 0.5}"#;
const TINY_CONFIG: &str = r#"{
  "network": {"layers": 1, "groups": 1, "hidden": 8, "dropout": 0.0},
  "search": {"epochs": 1, "batch_size": 8},
  "train": {"epochs": 2, "batch_size": 8, "checkpoint_every": 1}
}"#;

struct Tiny {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Tiny {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("spec.json"), TINY_SPEC).unwrap();
        std::fs::write(root.join("config.json"), TINY_CONFIG).unwrap();
        Tiny { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn full_pipeline_writes_artifacts_and_manifests() {
    let t = Tiny::new();
    let (spec, cfg, data) = (t.p("spec.json"), t.p("config.json"), t.p("data.ntcf"));
    let o = run(&["synth", "--spec", s(&spec), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&data)["subcommand"], "synth");

    let (geno, trace, arch) = (t.p("genotype.json"), t.p("trace.json"), t.p("arch.json"));
    let o = run(&[
        "search", "--data", s(&data), "--config", s(&cfg), "--seed", "3", "--out", s(&geno), "--trace", s(&trace),
        "--arch", s(&arch),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = nas_tc::Genotype::parse(&std::fs::read_to_string(&geno).unwrap()).unwrap();
    assert_eq!(g.meta.seed, Some(3));
    assert_eq!(read_json(&trace)["epochs"].as_array().unwrap().len(), 1);
    let m = manifest(&geno);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["network"]["channels"], 6);
    assert_eq!(m["config"]["train"]["batch_size"], 8);

    let derived = t.p("derived.json");
    let o = run(&["derive", "--arch", s(&arch), "--out", s(&derived)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = nas_tc::Genotype::parse(&std::fs::read_to_string(&derived).unwrap()).unwrap();
    assert_eq!(d.nodes, g.nodes);

    let (weights, history, ckpt) = (t.p("weights.ntcw"), t.p("history.json"), t.p("ckpt"));
    let o = run(&[
        "train", "--genotype", s(&geno), "--data", s(&data), "--val-data", s(&data), "--config", s(&cfg),
        "--out", s(&weights), "--history", s(&history), "--checkpoint-dir", s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&history).as_array().unwrap().len(), 2);
    assert!(ckpt.join("epoch-1.ntcw").is_file() && ckpt.join("epoch-2.ntcw").is_file());
    assert_eq!(
        std::fs::read(ckpt.join("epoch-2.ntcw")).unwrap(),
        std::fs::read(&weights).unwrap()
    );

    let report = t.p("report.json");
    let o = run(&[
        "eval", "--genotype", s(&geno), "--weights", s(&weights), "--data", s(&data), "--config", s(&cfg),
        "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&report);
    let map = r["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mAP"));
    assert_eq!(manifest(&report)["subcommand"], "eval");
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let t = Tiny::new();
    let data = t.p("data.ntcf");
    assert!(run(&["synth", "--spec", s(&t.p("spec.json")), "--out", s(&data)]).status.success());
    let mut outs = Vec::new();
    for i in 0..2 {
        let g = t.p(&format!("g{i}.json"));
        let w = t.p(&format!("w{i}.ntcw"));
        let cfg = t.p("config.json");
        assert!(run(&["search", "--data", s(&data), "--config", s(&cfg), "--out", s(&g)]).status.success());
        let o = run(&["train", "--genotype", s(&g), "--data", s(&data), "--config", s(&cfg), "--out", s(&w)]);
        assert!(o.status.success(), "{}", stderr(&o));
        outs.push((std::fs::read(&g).unwrap(), std::fs::read(&w).unwrap()));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn derive_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("arch.json");
    let out = dir.path().join("g.json");
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    let a = nas_tc::cell::CellArch::<f64>::random(1.0, &mut rng);
    std::fs::write(&arch, a.to_json().to_string()).unwrap();
    let o = run(&["derive", "--arch", s(&arch), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = nas_tc::Genotype::parse(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(g, a.derive_genotype());
    assert_eq!(manifest(&out)["subcommand"], "derive");
}

#[test]
fn missing_weights_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let o = run(&[
        "eval", "--weights", s(&missing), "--genotype", "g.json", "--data", "d.ntcf",
        "--out", s(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.bin"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = run(&["audit", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"), "{}", stderr(&o));
    let o = run(&["teleport"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn schema_errors_carry_a_pointer() {
    let t = Tiny::new();
    let data = t.p("data.ntcf");
    assert!(run(&["synth", "--spec", s(&t.p("spec.json")), "--out", s(&data)]).status.success());
    let bad = t.p("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochs": -1}}"#).unwrap();
    let o = run(&["search", "--data", s(&data), "--config", s(&bad), "--out", s(&t.p("g.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/train/epochs"), "{}", stderr(&o));
    assert!(!t.p("g.json").exists());
}

#[test]
fn corrupted_features_are_rejected() {
    let t = Tiny::new();
    let data = t.p("data.ntcf");
    assert!(run(&["synth", "--spec", s(&t.p("spec.json")), "--out", s(&data)]).status.success());
    let bytes = std::fs::read(&data).unwrap();
    std::fs::write(&data, &bytes[..bytes.len() - 3]).unwrap();
    let o = run(&["search", "--data", s(&data), "--config", s(&t.p("config.json")), "--out", s(&t.p("g.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("NTCF"), "{}", stderr(&o));
}

#[test]
fn audit_writes_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("audit.csv");
    let report = dir.path().join("audit.json");
    let o = run(&["audit", "--max-layers", "8", "--out", s(&csv), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layers,nas_tc_params,timeception_params");
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("0,"));
    assert!(!read_json(&report)["assumptions"].as_array().unwrap().is_empty());
    assert_eq!(manifest(&csv)["subcommand"], "audit");
}

#[test]
fn grad_check_reports_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc.json");
    let o = run(&["grad-check", "--trials", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for op in nas_tc::OpKind::ALL {
        assert!(stdout.contains(op.name()), "{op:?} missing from\n{stdout}");
    }
    assert!(stdout.contains("mixed_op"));
}

#[test]
fn thread_count_is_validated() {
    let o = bin().env("NAS_TC_THREADS", "zero").args(["audit", "--out", "/nonexistent/x.csv"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("NAS_TC_THREADS"));
}

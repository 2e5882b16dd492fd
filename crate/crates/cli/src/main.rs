//! `nas-tc` command-line driver.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use manifest::{write_atomic, RunManifest};
use nas_tc::audit::{audit, TimeceptionConfig};
use nas_tc::cell::CellArch;
use nas_tc::config::{from_json_str, load_config, Config};
use nas_tc::data::{generate_synthetic, Dataset, SynthSpec};
use nas_tc::gradcheck::{gradient_suite, TOLERANCE};
use nas_tc::search::search;
use nas_tc::train::{evaluate, train};
use nas_tc::weights::{read_weights, write_weights};
use nas_tc::{Error, Genotype, Network, NetworkConfig};

#[derive(Parser, Debug)]
#[command(name = "nas-tc", version, about = "Temporal-convolution cell search, training and parameter audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-motif feature dataset.
    Synth(SynthArgs),
    /// Search a cell on a feature dataset.
    Search(SearchArgs),
    /// Discretize architecture parameters into a genotype.
    Derive(DeriveArgs),
    /// Train a network for a fixed genotype.
    Train(TrainArgs),
    /// Evaluate trained weights.
    Eval(EvalArgs),
    /// Count parameters of NAS-TC and Timeception stacks.
    Audit(AuditArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synthetic dataset spec (JSON); omitted fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Derived genotype.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch search trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Final architecture parameters.
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DeriveArgs {
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out data scored after every epoch.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trained weights (NTCW).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training history.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Directory receiving `epoch-<E>.ntcw` checkpoints.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    genotype: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON report; the aligned table goes to standard output.
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Largest layer count in the sweep.
    #[arg(long, default_value_t = 8)]
    max_layers: usize,
    /// Genotype to count; defaults to the built-in fixture.
    #[arg(long)]
    genotype: Option<PathBuf>,
    /// Run config whose network section sets the channel plan and head.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Curve data with header `layers,nas_tc_params,timeception_params`.
    #[arg(long, default_value = "audit.csv")]
    out: PathBuf,
    /// Full report with assumptions and per-branch counts.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value = "grad-check.json")]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Invalid(anyhow::Error),
    Numeric(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numeric = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numeric));
        if numeric {
            Failure::Numeric(e)
        } else {
            Failure::Invalid(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric abort: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Sizes the worker pool from `NAS_TC_THREADS`, default 1.
fn init_threads() -> anyhow::Result<()> {
    let threads = match std::env::var("NAS_TC_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("NAS_TC_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting the worker pool")
}

fn run(cmd: Command) -> Outcome {
    let start = Instant::now();
    let argv: Vec<String> = std::env::args().collect();
    match cmd {
        Command::Synth(a) => synth(a, &argv, start),
        Command::Search(a) => search_cmd(a, &argv, start),
        Command::Derive(a) => derive(a, &argv, start),
        Command::Train(a) => train_cmd(a, &argv, start),
        Command::Eval(a) => eval(a, &argv, start),
        Command::Audit(a) => audit_cmd(a, &argv, start),
        Command::GradCheck(a) => grad_check(a, &argv, start),
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading features from {}", path.display()))
}

fn load_genotype(path: &Path) -> anyhow::Result<Genotype> {
    Genotype::parse(&read_text(path)?).with_context(|| format!("parsing genotype {}", path.display()))
}

fn config_or_default(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

/// Takes the feature and label dimensions from the data header.
fn adopt_data_shape(net: &mut NetworkConfig, data: &Dataset) -> anyhow::Result<()> {
    net.channels = data.channels;
    net.timesteps = data.timesteps;
    net.height = data.height;
    net.width = data.width;
    net.classes = data.classes;
    net.task = data.label_mode.task();
    net.validate()
        .with_context(|| "the network section does not fit the data".to_string())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v).expect("values are serializable") + "\n";
    write_atomic(path, text.as_bytes())
}

fn synth(a: SynthArgs, argv: &[String], start: Instant) -> Outcome {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => from_json_str(&read_text(p)?).with_context(|| format!("parsing spec {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let ds = generate_synthetic(&spec)?;
    write_atomic(&a.out, &ds.to_bytes()?)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    let mut m = RunManifest::new("synth", argv, serde_json::to_value(&spec).expect("serializable"), Some(spec.seed));
    if let Some(p) = &a.spec {
        m.input("spec", p);
    }
    m.output("features", &a.out);
    m.finish(start, &a.out)?;
    Ok(())
}

fn search_cmd(a: SearchArgs, argv: &[String], start: Instant) -> Outcome {
    let mut cfg = config_or_default(a.config.as_deref())?;
    let data = load_dataset(&a.data)?;
    adopt_data_shape(&mut cfg.network, &data)?;
    if let Some(s) = a.seed {
        cfg.search.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.search.epochs = e;
    }
    cfg.validate()?;
    let mut m = RunManifest::new("search", argv, cfg.to_json(), Some(cfg.search.seed));
    m.input("data", &a.data);
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    let result = search::<f32>(&data, &cfg.network, &cfg.search);
    let nas_tc::search::SearchOutcome { mut genotype, trace, arch } = match result {
        Ok(r) => r,
        Err(abort) => {
            if let Some(p) = &a.trace {
                write_json(p, &serde_json::to_value(&abort.trace).expect("serializable"))?;
                m.output("trace", p);
                m.finish(start, p)?;
            }
            return Err(anyhow::Error::new(abort.source).context("search aborted").into());
        }
    };
    genotype.meta.dataset = Some(path_str(&a.data));
    write_atomic(&a.out, (genotype.serialize() + "\n").as_bytes())?;
    m.output("genotype", &a.out);
    if let Some(p) = &a.trace {
        write_json(p, &serde_json::to_value(&trace).expect("serializable"))?;
        m.output("trace", p);
    }
    if let Some(p) = &a.arch {
        write_json(p, &arch.to_json())?;
        m.output("arch", p);
    }
    if let Some(last) = trace.epochs.last() {
        println!(
            "searched {} epochs: train loss {:.4}, val loss {:.4}",
            trace.epochs.len(),
            last.train_loss,
            last.val_loss
        );
    }
    println!("{}", genotype.serialize());
    m.finish(start, &a.out)?;
    Ok(())
}

fn derive(a: DeriveArgs, argv: &[String], start: Instant) -> Outcome {
    let text = read_text(&a.arch)?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.arch.display()))?;
    let arch = CellArch::<f64>::from_json(&v).with_context(|| format!("reading architecture {}", a.arch.display()))?;
    let genotype = arch.derive_genotype();
    write_atomic(&a.out, (genotype.serialize() + "\n").as_bytes())?;
    let mut m = RunManifest::new("derive", argv, json!({}), None);
    m.input("arch", &a.arch);
    m.output("genotype", &a.out);
    m.finish(start, &a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, argv: &[String], start: Instant) -> Outcome {
    let mut cfg = config_or_default(a.config.as_deref())?;
    let genotype = load_genotype(&a.genotype)?;
    let data = load_dataset(&a.data)?;
    let val = a.val_data.as_deref().map(load_dataset).transpose()?;
    adopt_data_shape(&mut cfg.network, &data)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let mut m = RunManifest::new("train", argv, cfg.to_json(), Some(cfg.train.seed));
    m.input("genotype", &a.genotype);
    m.input("data", &a.data);
    if let Some(p) = &a.val_data {
        m.input("val_data", p);
    }
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    if let Some(dir) = &a.checkpoint_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut written = Vec::new();
    let outcome = train::<f32>(&genotype, &data, val.as_ref(), &cfg.network, &cfg.train, |ck| {
        if let Some(dir) = &a.checkpoint_dir {
            let p = dir.join(format!("epoch-{}.ntcw", ck.epoch + 1));
            write_weights(&p, &ck.tensors)?;
            written.push(p);
        }
        Ok(())
    });
    for p in &written {
        m.output("checkpoint", p);
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(abort) => {
            if let Some(p) = &a.history {
                write_json(p, &serde_json::to_value(&abort.history).expect("serializable"))?;
                m.output("history", p);
            }
            if let Some(ck) = &abort.checkpoint {
                eprintln!("last checkpoint kept from epoch {}", ck.epoch + 1);
            }
            let at = written.last().or(a.history.as_ref()).unwrap_or(&a.out).clone();
            m.finish(start, &at)?;
            return Err(anyhow::Error::new(abort.source).context("training aborted").into());
        }
    };
    write_weights(&a.out, &outcome.network.named_tensors())?;
    m.output("weights", &a.out);
    if let Some(p) = &a.history {
        write_json(p, &serde_json::to_value(&outcome.history).expect("serializable"))?;
        m.output("history", p);
    }
    if let Some(last) = outcome.history.last() {
        match last.val_metric {
            Some(v) => println!("epoch {}: train loss {:.4}, val metric {:.4}", last.epoch + 1, last.train_loss, v),
            None => println!("epoch {}: train loss {:.4}", last.epoch + 1, last.train_loss),
        }
    }
    m.finish(start, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String], start: Instant) -> Outcome {
    if !a.weights.is_file() {
        return Err(anyhow!("weights file {} does not exist", a.weights.display()).into());
    }
    let mut cfg = config_or_default(a.config.as_deref())?;
    let genotype = load_genotype(&a.genotype)?;
    let data = load_dataset(&a.data)?;
    adopt_data_shape(&mut cfg.network, &data)?;
    let tensors = read_weights(&a.weights).with_context(|| format!("reading weights {}", a.weights.display()))?;
    let net = Network::<f32>::discrete_with_weights(&cfg.network, &genotype, &tensors)
        .with_context(|| format!("loading weights {}", a.weights.display()))?;
    let report = evaluate(&net, &data, cfg.train.batch_size)?;
    write_atomic(&a.out, (report.to_json() + "\n").as_bytes())?;
    print!("{}", report.to_table());
    let mut m = RunManifest::new("eval", argv, cfg.to_json(), None);
    m.input("genotype", &a.genotype);
    m.input("weights", &a.weights);
    m.input("data", &a.data);
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    m.output("report", &a.out);
    m.finish(start, &a.out)?;
    Ok(())
}

fn audit_cmd(a: AuditArgs, argv: &[String], start: Instant) -> Outcome {
    let cfg = config_or_default(a.config.as_deref())?;
    let genotype = match &a.genotype {
        Some(p) => load_genotype(p)?,
        None => Genotype::fixture(),
    };
    let tm = TimeceptionConfig::default();
    let report = audit(a.max_layers, &cfg.network, &genotype, &tm)?;
    write_atomic(&a.out, report.to_csv().as_bytes())?;
    print!("{}", report.to_text());
    let mut m = RunManifest::new(
        "audit",
        argv,
        json!({ "network": cfg.network, "timeception": tm, "max_layers": a.max_layers }),
        None,
    );
    if let Some(p) = &a.genotype {
        m.input("genotype", p);
    }
    if let Some(p) = &a.config {
        m.input("config", p);
    }
    m.output("csv", &a.out);
    if let Some(p) = &a.report {
        write_json(p, &serde_json::to_value(&report).expect("serializable"))?;
        m.output("report", p);
    }
    m.finish(start, &a.out)?;
    Ok(())
}

fn grad_check(a: GradCheckArgs, argv: &[String], start: Instant) -> Outcome {
    let results = gradient_suite(a.seed, a.trials)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:.3e}  {verdict}", r.name, r.max_rel_error);
    }
    write_json(
        &a.out,
        &json!({ "tolerance": TOLERANCE, "trials": a.trials, "results": results }),
    )?;
    let mut m = RunManifest::new("grad-check", argv, json!({ "trials": a.trials }), Some(a.seed));
    m.output("results", &a.out);
    m.finish(start, &a.out)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(anyhow!(
            "gradients disagree with finite differences for: {}",
            failed.join(", ")
        )))
    }
}

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use edgevote::bench::{self, BenchError, RunOptions};
use edgevote::dataset::{self, DatasetError};
use edgevote::ensemble::{Combo, EnsembleError, VotingMode};
use edgevote::models::EvalReport;
use edgevote::node::{self, NodeConfig, NodeError, Role};
use edgevote::pipeline::{self, ModelBundle, PipelineConfig, PipelineError};
use edgevote::protocol::ModelRef;

const DEFAULT_DATA: &str = "data/pima-indians-diabetes.csv";

#[derive(Parser)]
#[command(name = "edgevote", version, about = "Edge/cloud ensemble diabetes prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drop rows with missing values and write the filtered CSV.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated columns where 0 means missing.
        #[arg(long)]
        drop_cols: Option<String>,
    },
    /// Train a voting ensemble and write the model bundle.
    Train {
        #[arg(long, default_value = DEFAULT_DATA)]
        data: PathBuf,
        #[arg(long, default_value = "rf-svm-lr")]
        combo: String,
        #[arg(long, default_value = "hard")]
        mode: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Train every member on the full training split instead of a shard.
        #[arg(long)]
        whole_data: bool,
        #[arg(long, default_value_t = dataset::N_FEATURES)]
        rfe_k: usize,
        #[arg(long)]
        drop_cols: Option<String>,
    },
    /// Predict with a model bundle; writes `label,prob1` per row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a master node until killed.
    Master {
        #[command(flatten)]
        common: NodeArgs,
        /// Executors co-located in the master process.
        #[arg(long)]
        with_actors: Option<usize>,
        /// Print READY once this many workers have registered.
        #[arg(long, default_value_t = 0)]
        expect_workers: usize,
        #[arg(long)]
        cloud_address: Option<String>,
        #[arg(long)]
        cloud_id: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run a worker node until killed.
    Worker {
        #[command(flatten)]
        common: NodeArgs,
        #[arg(long)]
        master: Option<String>,
        /// Serve dispatches without registering (cloud nodes).
        #[arg(long)]
        no_register: bool,
    },
    /// Submit one prediction job through a master.
    Gateway {
        #[command(flatten)]
        common: NodeArgs,
        #[arg(long)]
        master: Option<String>,
        /// Model file name, resolved in the executing node's model directory.
        #[arg(long, conflicts_with = "model_file")]
        model: Option<String>,
        /// Local model bundle, shipped inline with the job.
        #[arg(long)]
        model_file: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run a deployment scenario and write timings.csv and summary.json.
    Bench {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_DATA)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct NodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    node_id: Option<String>,
    #[arg(long)]
    secret: Option<String>,
    #[arg(long)]
    model_dir: Option<PathBuf>,
}

/// Exit code plus message; 2 marks usage errors, 1 runtime failures.
struct Failure {
    code: u8,
    message: String,
}

fn usage(e: impl Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn runtime(e: impl Display) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::UnknownColumn(_)
        | DatasetError::BadK(_)
        | DatasetError::BadRatios(_)
        | DatasetError::MalformedRow { .. }
        | DatasetError::ArityMismatch { .. } => usage(e),
        e => runtime(e),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Dataset(e) => dataset_failure(e),
        PipelineError::Ensemble(EnsembleError::UnknownCombo(_)) => usage(e),
        e => runtime(e),
    }
}

fn node_failure(e: NodeError) -> Failure {
    match e {
        NodeError::Config(_) | NodeError::InvalidInput(_) => usage(e),
        e => runtime(e),
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Preprocess { input, out, drop_cols } => preprocess(&input, &out, drop_cols.as_deref()),
        Command::Train { data, combo, mode, seed, out, whole_data, rfe_k, drop_cols } => {
            train(&data, &combo, &mode, seed, &out, whole_data, rfe_k, drop_cols.as_deref())
        }
        Command::Predict { model, input, out } => predict(&model, &input, out.as_deref()),
        Command::Master { common, with_actors, expect_workers, cloud_address, cloud_id, threshold } => {
            master(common, with_actors, expect_workers, cloud_address, cloud_id, threshold)
        }
        Command::Worker { common, master, no_register } => worker(common, master, no_register),
        Command::Gateway { common, master, model, model_file, input } => {
            gateway(common, master, model, model_file, &input)
        }
        Command::Bench { preset, reps, out, data } => run_bench(&preset, reps, out, &data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn drop_columns(list: Option<&str>) -> Vec<String> {
    match list {
        Some(l) => dataset::parse_column_list(l),
        None => dataset::DEFAULT_MISSING_COLUMNS.iter().map(|f| f.csv_name().to_string()).collect(),
    }
}

fn preprocess(input: &Path, out: &Path, drop_cols: Option<&str>) -> CliResult {
    if same_file(input, out) {
        return Err(usage(format!("refusing to overwrite the input file {}", input.display())));
    }
    let columns = drop_columns(drop_cols);
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let raw = dataset::load_csv(input).map_err(dataset_failure)?;
    let kept = dataset::drop_missing(&raw, &columns).map_err(dataset_failure)?;
    kept.write_csv(out).map_err(dataset_failure)?;
    let (pos, neg) = kept.class_counts();
    println!("rows before: {}", raw.len());
    println!("rows after: {}", kept.len());
    println!("class 0: {neg}, class 1: {pos}");
    Ok(())
}

fn print_report(name: &str, r: &EvalReport) {
    println!(
        "{name:<10} accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  auc {:.4}",
        r.accuracy, r.precision, r.recall, r.f_measure, r.auc
    );
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    combo: &str,
    mode: &str,
    seed: u64,
    out: &Path,
    whole_data: bool,
    rfe_k: usize,
    drop_cols: Option<&str>,
) -> CliResult {
    if rfe_k == 0 || rfe_k > dataset::N_FEATURES {
        return Err(usage(DatasetError::BadK(rfe_k)));
    }
    let combo = Combo::parse(combo).map_err(usage)?;
    let mode: VotingMode = mode.parse().map_err(usage)?;
    let mut cfg = PipelineConfig::new(combo, seed);
    cfg.mode = mode;
    cfg.whole_data = whole_data;
    cfg.rfe_k = rfe_k;
    cfg.drop_columns = drop_columns(drop_cols);
    let raw = dataset::load_csv(data).map_err(dataset_failure)?;
    let bundle = pipeline::run(&raw, &cfg).map_err(pipeline_failure)?;
    bundle.save(out).map_err(pipeline_failure)?;
    println!(
        "trained {} ({} voting, {}) seed {seed} -> {}",
        bundle.combo,
        mode,
        if whole_data { "whole data" } else { "sharded" },
        out.display()
    );
    print_report("validation", &bundle.reports.validation);
    print_report("test", &bundle.reports.test);
    Ok(())
}

fn predict(model: &Path, input: &Path, out: Option<&Path>) -> CliResult {
    let bundle = ModelBundle::load(model).map_err(runtime)?;
    let text = std::fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let (rows, preds) = bundle.predict_csv(&text).map_err(pipeline_failure)?;
    let mut csv = String::from("label,prob1\n");
    for p in &preds {
        csv.push_str(&format!("{},{}\n", p.label, p.positive()));
    }
    match out {
        Some(path) => std::fs::write(path, &csv).map_err(|e| runtime(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    if let Some(labels) = &rows.labels {
        if !preds.is_empty() {
            let hits = preds.iter().zip(labels).filter(|(p, y)| p.label == **y).count();
            eprintln!("accuracy against input labels: {:.4} ({hits}/{})", hits as f64 / preds.len() as f64, preds.len());
        }
    }
    Ok(())
}

/// Config file, then environment, then flags.
fn node_config(role: Role, default_id: &str, common: &NodeArgs) -> Result<NodeConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => NodeConfig::from_json_file(path).map_err(usage)?,
        None => NodeConfig::for_role(role, default_id),
    };
    cfg.role = role;
    cfg.apply_env(|k| std::env::var(k).ok()).map_err(usage)?;
    if let Some(l) = &common.listen {
        cfg.listen_address = l.clone();
    }
    if let Some(id) = &common.node_id {
        cfg.node_id = id.clone();
    }
    if let Some(s) = &common.secret {
        cfg.shared_secret = s.clone();
    }
    if let Some(d) = &common.model_dir {
        cfg.model_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn announce(line: impl Display) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn master(
    common: NodeArgs,
    with_actors: Option<usize>,
    expect_workers: usize,
    cloud_address: Option<String>,
    cloud_id: Option<String>,
    threshold: Option<f64>,
) -> CliResult {
    let mut cfg = node_config(Role::Master, "master", &common)?;
    if let Some(n) = with_actors {
        cfg.local_actors = n;
    }
    if let Some(a) = cloud_address {
        cfg.cloud_address = Some(a);
        cfg.cloud_enabled = true;
    }
    if let Some(id) = cloud_id {
        cfg.cloud_id = id;
    }
    if let Some(t) = threshold {
        cfg.heavy_load_threshold = t;
    }
    cfg.validate().map_err(usage)?;
    let handle = node::run_master(cfg).map_err(node_failure)?;
    announce(format_args!("LISTENING {}", handle.address()));
    if expect_workers > 0 && !handle.wait_for_workers(expect_workers, Duration::from_secs(60)) {
        return Err(runtime(format!(
            "only {} of {expect_workers} workers registered",
            handle.remote_workers()
        )));
    }
    announce("READY");
    handle.join();
    Ok(())
}

fn worker(common: NodeArgs, master: Option<String>, no_register: bool) -> CliResult {
    let mut cfg = node_config(Role::Worker, "worker", &common)?;
    if master.is_some() {
        cfg.master_address = master;
    }
    if no_register {
        cfg.register = false;
    }
    cfg.validate().map_err(usage)?;
    let handle = node::run_worker(cfg).map_err(node_failure)?;
    announce(format_args!("LISTENING {}", handle.address));
    let id = handle.id.clone();
    handle.join();
    Err(runtime(format!("worker {id} stopped")))
}

fn gateway(
    common: NodeArgs,
    master: Option<String>,
    model: Option<String>,
    model_file: Option<PathBuf>,
    input: &Path,
) -> CliResult {
    let mut cfg = node_config(Role::Gateway, "gateway", &common)?;
    if master.is_some() {
        cfg.master_address = master;
    }
    let model = match (model, model_file) {
        (_, Some(path)) => ModelRef::Inline { bundle: Box::new(ModelBundle::load(&path).map_err(runtime)?) },
        (Some(name), None) => ModelRef::Named { name },
        (None, None) => ModelRef::Named { name: bench::MODEL_FILE.into() },
    };
    let csv = std::fs::read_to_string(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let (preds, timing) = node::submit_job(&cfg, &csv, model).map_err(node_failure)?;
    println!("label,prob1");
    for p in &preds {
        println!("{},{}", p.label, p.positive());
    }
    println!("{}", bench::TIMING_CSV_HEADER);
    println!(
        "{},{},{},{},{},{},{},{}",
        timing.job_id,
        timing.scenario,
        timing.arbitration_ms,
        timing.latency_ms,
        timing.execution_ms,
        timing.response_ms,
        timing.bytes_sent,
        timing.bytes_received
    );
    Ok(())
}

fn run_bench(preset: &str, reps: Option<usize>, out: Option<PathBuf>, data: &Path) -> CliResult {
    let mut scenario = bench::preset(preset).map_err(|e| match e {
        BenchError::UnknownPreset(_) => usage(e),
        e => runtime(e),
    })?;
    if let Some(r) = reps {
        if r == 0 {
            return Err(usage("--reps must be at least 1"));
        }
        scenario.repetitions = r;
    }
    let out = out.unwrap_or_else(|| PathBuf::from("bench-out").join(preset));
    let raw = dataset::load_csv(data).map_err(dataset_failure)?;
    let opts = RunOptions {
        exe: std::env::current_exe().map_err(runtime)?,
        work_dir: out.join("work"),
        dataset: raw,
        startup_timeout: Duration::from_secs(30),
    };
    info!("running {} with {} repetitions", scenario.name, scenario.repetitions);
    let result = bench::run_scenario(&scenario, &opts).map_err(runtime)?;
    if !result.records.is_empty() {
        let summaries = bench::report(&result.records, &out).map_err(runtime)?;
        print!("{}", bench::format_summary(&summaries));
    }
    if let Some(e) = &result.eval {
        println!("prediction accuracy over all jobs: {:.4}", e.accuracy);
    }
    println!("completed {}/{} jobs; report in {}", result.completed, result.requested, out.display());
    match result.failure {
        Some(f) => Err(runtime(f)),
        None if !result.is_complete() => Err(runtime("scenario incomplete")),
        None => Ok(()),
    }
}

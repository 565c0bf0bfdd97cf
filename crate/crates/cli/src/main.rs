//! `evcrp` command line: instance generation, labeling, dataset encoding,
//! training, solving and benchmarking.
//!
//! Every subcommand prints one JSON summary line on stdout. Exit codes:
//! 0 success, 1 usage, 2 malformed input, 3 failed solve, 4 codec or model
//! mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use evcrp::bench::{run_benchmark_with, BenchConfig, BenchError, SolverContext};
use evcrp::codec::{CodecError, CodecParams, Dataset, DemandNorm};
use evcrp::files;
use evcrp::gen::{ingest_acn, GenParams, UtilityMode};
use evcrp::lp::PtasParams;
use evcrp::model::{check_feasibility, Horizon, Instance};
use evcrp::neuro::{load_model, save_model, NeuroError};
use evcrp::oracle::SearchLimits;
use evcrp::pipeline::{self, PipelineConfig, PipelineError};
use evcrp::postproc::SortKey;
use evcrp::seed;
use evcrp::solution::Method;

const OUT_DIR_ENV: &str = "EVCRP_OUT_DIR";
const WORKERS_ENV: &str = "EVCRP_WORKERS";

#[derive(Parser)]
#[command(name = "evcrp", version, about = "EV charging reservation scheduling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON pipeline config supplying defaults for every stage.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct CodecArgs {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    v: Option<usize>,
    /// capacity or group-max
    #[arg(long, value_parser = parse_demand_norm)]
    demand_norm: Option<DemandNorm>,
}

impl CodecArgs {
    fn apply(&self, mut p: CodecParams) -> CodecParams {
        p.q = self.q.unwrap_or(p.q);
        p.l = self.l.unwrap_or(p.l);
        p.v = self.v.unwrap_or(p.v);
        p.demand_norm = self.demand_norm.unwrap_or(p.demand_norm);
        p
    }
}

fn parse_demand_norm(s: &str) -> Result<DemandNorm, String> {
    match s {
        "capacity" => Ok(DemandNorm::Capacity),
        "group-max" => Ok(DemandNorm::GroupMax),
        other => Err(format!("unknown demand norm `{other}` (expected capacity or group-max)")),
    }
}

#[derive(Args, Clone, Default)]
struct GenArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    capacity: Option<f64>,
    #[arg(long)]
    profile: Option<u8>,
    #[arg(long)]
    base_load_scale: Option<f64>,
    /// linear or random
    #[arg(long)]
    utility: Option<String>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    slot_hours: Option<f64>,
    /// EVSE count applied to every station.
    #[arg(long)]
    evse: Option<u32>,
}

impl GenArgs {
    fn apply(&self, mut p: GenParams) -> Result<GenParams, Failure> {
        if let Some(n) = self.users {
            p.num_users = n;
        }
        if let Some(c) = self.capacity {
            p.capacity_kw = c;
        }
        if let Some(id) = self.profile {
            p.load_profile = id;
        }
        if let Some(s) = self.base_load_scale {
            p.base_load_scale = s;
        }
        match self.utility.as_deref() {
            None => {}
            Some("linear") => p.utility = UtilityMode::Linear,
            Some("random") => p.utility = UtilityMode::random_default(),
            Some(other) => return Err(Failure::usage(format!("unknown utility mode `{other}`"))),
        }
        if self.slots.is_some() || self.slot_hours.is_some() {
            p.horizon = Horizon::new(
                self.slots.unwrap_or(p.horizon.num_slots),
                self.slot_hours.unwrap_or(p.horizon.slot_hours),
            );
        }
        if let Some(n) = self.evse {
            for s in &mut p.stations {
                s.num_evse = n;
            }
        }
        Ok(p)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic instances.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
        /// Number of instances.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an instance from an ACN-style session CSV.
    IngestAcn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenArgs,
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve instances exactly and write their optimal schedules.
    Label {
        #[command(flatten)]
        common: Common,
        /// Instance files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-instance time limit in seconds.
        #[arg(long)]
        time_limit: Option<f64>,
    },
    /// Encode instances and their schedules into a dataset.
    Encode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        codec: CodecArgs,
        /// Directory of instance files.
        #[arg(long)]
        instances: PathBuf,
        /// Directory of schedules named like the instances.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Comma-separated hidden widths.
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        /// Use the nine-layer architecture.
        #[arg(long)]
        full: bool,
    },
    /// Solve one instance with one method.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        codec: CodecArgs,
        instance: PathBuf,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        guesses: Option<usize>,
        #[arg(long)]
        time_limit: Option<f64>,
        /// gain or utility
        #[arg(long)]
        sort: Option<SortKey>,
        /// Schedule output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the benchmark section of the config.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Report path stem; `.csv` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate, label, encode, train and benchmark in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

/// An error tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
    fn usage(msg: impl Into<String>) -> Self {
        Self::new(1, anyhow::anyhow!(msg.into()))
    }
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self::new(2, error)
    }
    fn solve(error: impl Into<anyhow::Error>) -> Self {
        Self::new(3, error)
    }
}

fn codec_failure(e: CodecError) -> Failure {
    match e {
        CodecError::Mismatch { .. } => Failure::new(4, e),
        other => Failure::input(other),
    }
}

fn neuro_failure(e: NeuroError) -> Failure {
    match e {
        NeuroError::Codec(CodecError::Mismatch { .. }) | NeuroError::Dimension { .. } => Failure::new(4, e),
        NeuroError::Codec(CodecError::Format(_)) => Failure::new(4, e),
        NeuroError::Corrupt(_) | NeuroError::Io(_) | NeuroError::Json(_) => Failure::input(e),
        other => Failure::solve(other),
    }
}

fn bench_failure(e: BenchError) -> Failure {
    match e {
        BenchError::Neuro(n) => neuro_failure(n),
        BenchError::Load(..) | BenchError::NoInstances | BenchError::Gen(_) => Failure::input(e),
        BenchError::MissingModel => Failure::usage(e.to_string()),
        other => Failure::solve(other),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Codec(c) => codec_failure(c),
        PipelineError::Neuro(n) => neuro_failure(n),
        PipelineError::Bench(b) => bench_failure(b),
        PipelineError::Gen(_) | PipelineError::File(_) => Failure::input(e),
        other => Failure::solve(other),
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => files::read_json::<PipelineConfig>(path).map_err(Failure::input)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read_instance(path: &Path) -> Result<Instance, Failure> {
    files::read_instance(path).map_err(Failure::input)
}

/// Instance files named directly or found (as `*.json`) in directories.
fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if !p.exists() {
            return Err(Failure::input(anyhow::anyhow!("{} does not exist", p.display())));
        }
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::input(anyhow::anyhow!("no instance files found")));
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::input)
}

fn time_limits(base: SearchLimits, seconds: Option<f64>) -> Result<SearchLimits, Failure> {
    match seconds {
        Some(s) if !(s >= 0.0) || !s.is_finite() => Err(Failure::usage("time limit must be a non-negative number")),
        Some(s) => Ok(SearchLimits {
            time_budget: Some(std::time::Duration::from_secs_f64(s)),
            ..base
        }),
        None => Ok(base),
    }
}

fn run(command: Command) -> Result<Value, Failure> {
    match command {
        Command::Generate { common, gen, count, out } => {
            let cfg = load_config(&common)?;
            let params = gen.apply(cfg.generator.clone())?;
            params.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let dir = out_dir(&out);
            create_dir(&dir)?;
            let instances = pipeline::generate_corpus(&params, cfg.seed, 0, count).map_err(Failure::input)?;
            for (name, inst) in &instances {
                files::write_instance(&dir.join(format!("{name}.json")), inst).map_err(Failure::input)?;
            }
            Ok(json!({
                "command": "generate",
                "seed": cfg.seed,
                "instances": instances.len(),
                "users": params.num_users,
                "out": dir,
            }))
        }
        Command::IngestAcn { common, gen, csv, out } => {
            let cfg = load_config(&common)?;
            let params = GenParams {
                seed: seed::derive(cfg.seed, seed::stream::INGEST, 0),
                ..gen.apply(cfg.generator.clone())?
            };
            let import = ingest_acn(&csv, &params).map_err(Failure::input)?;
            for s in &import.skipped {
                log::warn!("line {}: {}", s.line, s.reason);
            }
            files::write_instance(&out, &import.instance).map_err(Failure::input)?;
            Ok(json!({
                "command": "ingest-acn",
                "requests": import.instance.requests.len(),
                "skipped": import.skipped.len(),
                "out": out,
            }))
        }
        Command::Label {
            common,
            inputs,
            out,
            time_limit,
        } => {
            let cfg = load_config(&common)?;
            let limits = time_limits(cfg.label_limits, time_limit)?;
            let paths = expand_inputs(&inputs)?;
            let dir = out_dir(&out);
            create_dir(&dir)?;
            let named: Vec<(String, Instance)> = paths
                .iter()
                .map(|p| Ok((file_name(p), read_instance(p)?)))
                .collect::<Result<_, Failure>>()?;
            let labels = pipeline::label_corpus(&named, &limits);
            let mut not_optimal = Vec::new();
            let mut total = 0.0;
            for ((name, _), sol) in named.iter().zip(&labels) {
                files::write_schedule(&dir.join(name), &sol.schedule).map_err(Failure::input)?;
                total += sol.objective;
                if !sol.optimal {
                    not_optimal.push(name.clone());
                }
            }
            if !not_optimal.is_empty() {
                return Err(Failure::solve(anyhow::anyhow!(
                    "optimality not proven within the limits for {}",
                    not_optimal.join(", ")
                )));
            }
            Ok(json!({
                "command": "label",
                "instances": named.len(),
                "total_objective": total,
                "out": dir,
            }))
        }
        Command::Encode {
            common,
            codec,
            instances,
            labels,
            out,
        } => {
            let cfg = load_config(&common)?;
            let params = codec.apply(cfg.codec);
            params.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let paths = expand_inputs(&[instances])?;
            let mut named = Vec::new();
            let mut sols = Vec::new();
            for p in &paths {
                let name = file_name(p);
                let inst = read_instance(p)?;
                let schedule = files::read_schedule(&labels.join(&name)).map_err(Failure::input)?;
                let objective = evcrp::evaluate_objective(&inst, &schedule)
                    .with_context(|| format!("label for {name}"))
                    .map_err(Failure::input)?;
                let report = check_feasibility(&inst, &schedule);
                if !report.feasible {
                    return Err(Failure::input(anyhow::anyhow!("label for {name} is infeasible")));
                }
                sols.push(evcrp::Solution {
                    schedule,
                    objective,
                    wall_time: Default::default(),
                    method: Method::Exact,
                    optimal: true,
                });
                named.push((name, inst));
            }
            let ds = pipeline::build_dataset(&named, &sols, &params).map_err(codec_failure)?;
            ds.save(&out).map_err(codec_failure)?;
            Ok(json!({
                "command": "encode",
                "records": ds.records.len(),
                "feature_len": ds.spec.feature_len(),
                "label_len": ds.spec.label_len(),
                "out": out,
            }))
        }
        Command::Train {
            common,
            dataset,
            out,
            epochs,
            batch_size,
            lr,
            hidden,
            full,
        } => {
            let cfg = load_config(&common)?;
            let mut hp = cfg.training.clone();
            hp.seed = cfg.seed;
            hp.epochs = epochs.unwrap_or(hp.epochs);
            hp.batch_size = batch_size.unwrap_or(hp.batch_size);
            hp.learning_rate = lr.unwrap_or(hp.learning_rate);
            if full {
                hp.hidden = evcrp::neuro::full_hidden();
            }
            if let Some(h) = hidden {
                hp.hidden = h;
            }
            hp.validate().map_err(|e| Failure::usage(e.to_string()))?;
            let ds = Dataset::load(&dataset).map_err(Failure::input)?;
            let (net, report) = pipeline::train_model(&ds, &hp).map_err(neuro_failure)?;
            save_model(&net, &out).map_err(Failure::input)?;
            Ok(json!({
                "command": "train",
                "epochs": hp.epochs,
                "train_size": report.train_size,
                "val_size": report.val_size,
                "final_train_loss": report.train_loss.last(),
                "final_val_loss": report.val_loss.last(),
                "checksum": report.checksum,
                "out": out,
            }))
        }
        Command::Solve {
            common,
            codec,
            instance,
            method,
            model,
            guesses,
            time_limit,
            sort,
            out,
        } => {
            let cfg = load_config(&common)?;
            let inst = read_instance(&instance)?;
            let mut ctx = SolverContext {
                ptas: PtasParams {
                    num_guesses: guesses.unwrap_or(cfg.bench.ptas.num_guesses),
                    ..cfg.bench.ptas
                },
                exact: time_limits(cfg.bench.exact, time_limit)?,
                network: None,
                codec: codec.apply(cfg.codec),
                sort: sort.unwrap_or(cfg.bench.sort),
            };
            if method == Method::Dclevernet {
                let path = model
                    .as_ref()
                    .or(cfg.bench.model.as_ref())
                    .ok_or_else(|| Failure::usage("--model is required for dclevernet"))?;
                let net = load_model(path).map_err(neuro_failure)?;
                let own = net
                    .codec
                    .ok_or_else(|| Failure::new(4, anyhow::anyhow!("model carries no codec description")))?;
                if common.config.is_none() {
                    ctx.codec = codec.apply(own.params);
                }
                own.ensure_eq(&ctx.codec.spec_for(&inst)).map_err(codec_failure)?;
                ctx.network = Some(net);
            }
            let seed = seed::derive(cfg.seed, seed::stream::PTAS, 0);
            let sol = ctx.solve(&inst, method, seed).map_err(bench_failure)?;
            let report = check_feasibility(&inst, &sol.schedule);
            if !report.feasible {
                return Err(Failure::solve(anyhow::anyhow!(
                    "{method} produced an infeasible schedule ({} violations)",
                    report.violations.len()
                )));
            }
            let out = out.unwrap_or_else(|| {
                let stem = instance.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out_dir(&None).join(format!("{stem}.{method}.json"))
            });
            files::write_schedule(&out, &sol.schedule).map_err(Failure::input)?;
            if method == Method::Exact && !sol.optimal {
                return Err(Failure::solve(anyhow::anyhow!(
                    "optimality not proven within the limits (incumbent {} written to {})",
                    sol.objective,
                    out.display()
                )));
            }
            Ok(json!({
                "command": "solve",
                "method": method,
                "objective": sol.objective,
                "accepted": sol.schedule.num_accepted(),
                "optimal": sol.optimal,
                "wall_time_s": sol.wall_time.as_secs_f64(),
                "out": out,
            }))
        }
        Command::Bench { common, model, out } => {
            let cfg = load_config(&common)?;
            let bench = BenchConfig {
                seed: cfg.seed,
                model: model.or(cfg.bench.model.clone()),
                output: Some(out.unwrap_or_else(|| out_dir(&None).join("bench"))),
                codec: cfg.codec,
                ..cfg.bench.clone()
            };
            let network = match &bench.model {
                Some(p) => Some(load_model(p).map_err(neuro_failure)?),
                None => None,
            };
            let ctx = SolverContext {
                ptas: bench.ptas,
                exact: bench.exact,
                network,
                codec: bench.codec,
                sort: bench.sort,
            };
            let report = run_benchmark_with(&bench, &ctx).map_err(bench_failure)?;
            let infeasible: usize = report.summary.iter().map(|s| s.infeasible).sum();
            let summary: Vec<Value> = report
                .summary
                .iter()
                .map(|s| json!({"method": s.method, "mean_ratio": s.mean_ratio, "mean_time_s": s.mean_time_s}))
                .collect();
            if infeasible > 0 {
                return Err(Failure::solve(anyhow::anyhow!("{infeasible} infeasible schedules")));
            }
            Ok(json!({
                "command": "bench",
                "rows": report.rows.len(),
                "summary": summary,
                "out": bench.output,
            }))
        }
        Command::Pipeline { common, out } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&out);
            let summary = pipeline::run_pipeline(&cfg, &dir).map_err(pipeline_failure)?;
            Ok(json!({
                "command": "pipeline",
                "train_instances": summary.train_instances,
                "test_instances": summary.test_instances,
                "checksum": summary.model_checksum,
                "final_val_loss": summary.final_val_loss,
                "out": dir,
            }))
        }
    }
}

fn init_workers() -> Result<(), Failure> {
    if let Some(raw) = std::env::var_os(WORKERS_ENV) {
        let n: usize = raw
            .to_string_lossy()
            .parse()
            .map_err(|_| Failure::usage(format!("{WORKERS_ENV} must be a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(error: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in error.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_workers().and_then(|_| run(cli.command));
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let msg = describe(&f.error);
            eprintln!("error: {msg}");
            println!("{}", json!({"error": msg, "exit_code": f.code}));
            ExitCode::from(f.code)
        }
    }
}

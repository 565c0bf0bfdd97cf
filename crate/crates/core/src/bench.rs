//! Method comparison harness: approximation ratios against an exact or
//! best-known reference, and median wall times.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecParams;
use crate::gen::{generate_synthetic, GenError, GenParams};
use crate::lp::{lp_rounding, ptas_star, solve_lp_relaxation, LpError, PtasParams};
use crate::model::{check_feasibility, Instance};
use crate::neuro::{Network, NeuroError};
use crate::oracle::{enumerate_exhaustive, solve_exact, OracleError, SearchLimits};
use crate::postproc::{solve_with_network, SortKey};
use crate::seed;
use crate::solution::{Method, Solution};
use crate::greedy::greedy_u;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("method dclevernet needs a trained model")]
    MissingModel,
    #[error("reference for `{0}` is not usable: {1}")]
    Reference(String, String),
    #[error("no instances matched")]
    NoInstances,
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Neuro(#[from] NeuroError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("instance `{0}`: {1}")]
    Load(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `objective / reference`, undefined for a non-positive reference.
pub fn approx_ratio(objective: f64, reference: f64) -> Option<f64> {
    (reference > 0.0).then(|| objective / reference)
}

/// Everything a method needs besides the instance.
#[derive(Debug, Clone)]
pub struct SolverContext {
    pub ptas: PtasParams,
    pub exact: SearchLimits,
    pub network: Option<Network>,
    pub codec: CodecParams,
    pub sort: SortKey,
}

impl Default for SolverContext {
    fn default() -> Self {
        Self {
            ptas: PtasParams::default(),
            exact: SearchLimits::benchmarking(),
            network: None,
            codec: CodecParams::default(),
            sort: SortKey::Gain,
        }
    }
}

impl SolverContext {
    /// Runs `method`; `seed` feeds the randomised methods.
    pub fn solve(&self, instance: &Instance, method: Method, seed: u64) -> Result<Solution, BenchError> {
        Ok(match method {
            Method::Exhaustive => enumerate_exhaustive(instance)?,
            Method::Exact => solve_exact(instance, &self.exact),
            Method::GreedyU => greedy_u(instance),
            Method::PtasStar => ptas_star(instance, &PtasParams { seed, ..self.ptas }),
            Method::LpRounding => lp_rounding(instance)?,
            Method::Dclevernet => {
                let net = self.network.as_ref().ok_or(BenchError::MissingModel)?;
                solve_with_network(instance, net, &self.codec, self.sort)?.solution
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// Exact optimum from the branch-and-bound oracle.
    #[default]
    Exact,
    /// Best objective over the benchmarked methods.
    BestKnown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InstanceSource {
    Generate { params: GenParams, count: usize },
    /// Instance JSON files; entries may be glob patterns.
    Files { paths: Vec<String> },
}

impl Default for InstanceSource {
    fn default() -> Self {
        Self::Generate {
            params: GenParams::default(),
            count: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub source: InstanceSource,
    pub methods: Vec<Method>,
    pub reference: Reference,
    /// Timed runs per (instance, method); the median is reported.
    pub repetitions: usize,
    /// Untimed run before the timed ones.
    pub warmup: bool,
    /// Also solve the LP relaxation and report ratios against it.
    pub lp_bound: bool,
    pub seed: u64,
    pub ptas: PtasParams,
    pub exact: SearchLimits,
    pub codec: CodecParams,
    pub sort: SortKey,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            source: InstanceSource::default(),
            methods: vec![Method::Exact, Method::GreedyU, Method::PtasStar],
            reference: Reference::Exact,
            repetitions: 3,
            warmup: true,
            lp_bound: false,
            seed: 0,
            ptas: PtasParams::default(),
            exact: SearchLimits::benchmarking(),
            codec: CodecParams::default(),
            sort: SortKey::Gain,
            model: None,
            output: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub instance: String,
    pub num_users: usize,
    pub method: Method,
    pub objective: f64,
    pub reference: f64,
    pub ratio: Option<f64>,
    pub lp_bound: Option<f64>,
    pub ratio_vs_lp: Option<f64>,
    pub wall_time_s: f64,
    pub feasible: bool,
    pub optimal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    /// Runs with a defined ratio.
    pub rated: usize,
    pub mean_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
    pub mean_ratio_vs_lp: Option<f64>,
    pub mean_time_s: f64,
    pub infeasible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub reference: Reference,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<MethodSummary>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(mut xs: Vec<Duration>) -> Duration {
    if xs.is_empty() {
        return Duration::ZERO;
    }
    xs.sort_unstable();
    xs[xs.len() / 2]
}

impl BenchReport {
    pub fn from_rows(reference: Reference, rows: Vec<BenchRow>, methods: &[Method]) -> Self {
        let summary = methods
            .iter()
            .map(|&m| {
                let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.method == m).collect();
                let ratios: Vec<f64> = mine.iter().filter_map(|r| r.ratio).collect();
                let vs_lp: Vec<f64> = mine.iter().filter_map(|r| r.ratio_vs_lp).collect();
                let times: Vec<f64> = mine.iter().map(|r| r.wall_time_s).collect();
                MethodSummary {
                    method: m,
                    runs: mine.len(),
                    rated: ratios.len(),
                    mean_ratio: mean(&ratios),
                    min_ratio: ratios.iter().copied().reduce(f64::min),
                    max_ratio: ratios.iter().copied().reduce(f64::max),
                    mean_ratio_vs_lp: mean(&vs_lp),
                    mean_time_s: mean(&times).unwrap_or(0.0),
                    infeasible: mine.iter().filter(|r| !r.feasible).count(),
                }
            })
            .collect();
        Self {
            reference,
            rows,
            summary,
        }
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<(), BenchError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn write(&self, stem: &Path) -> Result<(), BenchError> {
        self.write_csv(&stem.with_extension("csv"))?;
        self.write_json(&stem.with_extension("json"))
    }
}

/// Named instances of a source, in a deterministic order.
pub fn load_instances(source: &InstanceSource) -> Result<Vec<(String, Instance)>, BenchError> {
    match source {
        InstanceSource::Generate { params, count } => (0..*count)
            .map(|i| {
                let p = GenParams {
                    seed: seed::derive(params.seed, seed::stream::BENCH, i as u64),
                    ..params.clone()
                };
                Ok((format!("gen-{i:05}"), generate_synthetic(&p)?))
            })
            .collect(),
        InstanceSource::Files { paths } => {
            let mut files = Vec::new();
            for pattern in paths {
                let matches = glob::glob(pattern)
                    .map_err(|e| BenchError::Load(pattern.clone(), e.to_string()))?;
                for m in matches {
                    files.push(m.map_err(|e| BenchError::Load(pattern.clone(), e.to_string()))?);
                }
            }
            files.sort();
            files.dedup();
            if files.is_empty() {
                return Err(BenchError::NoInstances);
            }
            files
                .into_iter()
                .map(|f| {
                    let name = f
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| f.display().to_string());
                    let inst = crate::files::read_instance(&f).map_err(|e| BenchError::Load(name.clone(), e.to_string()))?;
                    Ok((name, inst))
                })
                .collect()
        }
    }
}

fn timed(ctx: &SolverContext, inst: &Instance, method: Method, seed: u64, cfg: &BenchConfig) -> Result<Solution, BenchError> {
    if cfg.warmup {
        ctx.solve(inst, method, seed)?;
    }
    let mut times = Vec::with_capacity(cfg.repetitions.max(1));
    let mut first: Option<Solution> = None;
    for _ in 0..cfg.repetitions.max(1) {
        let start = Instant::now();
        let sol = ctx.solve(inst, method, seed)?;
        times.push(start.elapsed());
        first.get_or_insert(sol);
    }
    let mut sol = first.expect("at least one run");
    sol.wall_time = median(times);
    Ok(sol)
}

/// Benchmarks every configured method on one instance.
pub fn bench_instance(
    name: &str,
    instance: &Instance,
    index: u64,
    ctx: &SolverContext,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>, BenchError> {
    let seed = seed::derive(cfg.seed, seed::stream::BENCH, index);
    let mut solutions = BTreeMap::new();
    for &m in &cfg.methods {
        solutions.insert(m, timed(ctx, instance, m, seed, cfg)?);
    }
    let reference = match cfg.reference {
        Reference::Exact => match solutions.get(&Method::Exact) {
            Some(s) => s.clone(),
            None => ctx.solve(instance, Method::Exact, seed)?,
        },
        Reference::BestKnown => solutions
            .values()
            .max_by(|a, b| a.objective.total_cmp(&b.objective))
            .cloned()
            .ok_or_else(|| BenchError::Reference(name.into(), "no methods".into()))?,
    };
    if !check_feasibility(instance, &reference.schedule).feasible {
        return Err(BenchError::Reference(name.into(), "reference schedule is infeasible".into()));
    }
    let lp = if cfg.lp_bound {
        Some(solve_lp_relaxation(instance, &[], |_, _| true)?.objective)
    } else {
        None
    };
    Ok(cfg
        .methods
        .iter()
        .map(|m| {
            let s = &solutions[m];
            BenchRow {
                instance: name.to_string(),
                num_users: instance.requests.len(),
                method: *m,
                objective: s.objective,
                reference: reference.objective,
                ratio: approx_ratio(s.objective, reference.objective),
                lp_bound: lp,
                ratio_vs_lp: lp.and_then(|b| approx_ratio(s.objective, b)),
                wall_time_s: s.wall_time.as_secs_f64(),
                feasible: check_feasibility(instance, &s.schedule).feasible,
                optimal: s.optimal,
            }
        })
        .collect())
}

pub fn run_benchmark_with(cfg: &BenchConfig, ctx: &SolverContext) -> Result<BenchReport, BenchError> {
    if cfg.methods.contains(&Method::Dclevernet) && ctx.network.is_none() {
        return Err(BenchError::MissingModel);
    }
    let instances = load_instances(&cfg.source)?;
    let rows: Vec<Vec<BenchRow>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, (name, inst))| bench_instance(name, inst, i as u64, ctx, cfg))
        .collect::<Result<_, _>>()?;
    let report = BenchReport::from_rows(cfg.reference, rows.into_iter().flatten().collect(), &cfg.methods);
    if let Some(out) = &cfg.output {
        report.write(out)?;
    }
    Ok(report)
}

/// Loads the model named in the config (if any) and runs the benchmark.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    let network = match &cfg.model {
        Some(path) => Some(crate::neuro::load_model(path)?),
        None => None,
    };
    let ctx = SolverContext {
        ptas: cfg.ptas,
        exact: cfg.exact,
        network,
        codec: cfg.codec,
        sort: cfg.sort,
    };
    run_benchmark_with(cfg, &ctx)
}

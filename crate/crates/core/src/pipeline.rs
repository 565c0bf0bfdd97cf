//! Config-driven end-to-end runs: generate, label, encode, train, benchmark.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{run_benchmark_with, BenchConfig, BenchError, BenchReport, InstanceSource, SolverContext};
use crate::codec::{encode_features, encode_label, CodecError, CodecParams, Dataset, Record};
use crate::files::{self, FileError};
use crate::gen::{generate_synthetic, GenError, GenParams};
use crate::model::Instance;
use crate::neuro::{init_network, layer_dims, save_model, train, Hyperparams, Network, NeuroError, TrainReport};
use crate::oracle::{solve_exact, SearchLimits};
use crate::seed;
use crate::solution::{Method, Solution};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Neuro(#[from] NeuroError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("labeling did not prove optimality for `{0}`")]
    NotOptimal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub generator: GenParams,
    pub train_instances: usize,
    pub test_instances: usize,
    /// Fail instead of keeping a non-optimal label.
    pub require_optimal_labels: bool,
    pub label_limits: SearchLimits,
    pub codec: CodecParams,
    pub training: Hyperparams,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GenParams::default(),
            train_instances: 200,
            test_instances: 20,
            require_optimal_labels: true,
            label_limits: SearchLimits::default(),
            codec: CodecParams::default(),
            training: Hyperparams::default(),
            bench: BenchConfig {
                methods: vec![Method::Exact, Method::GreedyU, Method::PtasStar, Method::Dclevernet],
                ..BenchConfig::default()
            },
        }
    }
}

/// Instances `start..start + count` of a seeded stream, named by index.
pub fn generate_corpus(params: &GenParams, master: u64, start: usize, count: usize) -> Result<Vec<(String, Instance)>, GenError> {
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let p = GenParams {
                seed: seed::derive(master, seed::stream::GENERATE, i as u64),
                ..params.clone()
            };
            Ok((format!("inst-{i:05}"), generate_synthetic(&p)?))
        })
        .collect()
}

pub fn label_corpus(instances: &[(String, Instance)], limits: &SearchLimits) -> Vec<Solution> {
    instances.par_iter().map(|(_, inst)| solve_exact(inst, limits)).collect()
}

pub fn build_dataset(
    instances: &[(String, Instance)],
    labels: &[Solution],
    codec: &CodecParams,
) -> Result<Dataset, CodecError> {
    let spec = match instances.first() {
        Some((_, inst)) => codec.spec_for(inst),
        None => return Err(CodecError::Format("no instances to encode".into())),
    };
    let mut ds = Dataset::new(spec);
    let records: Vec<Record> = instances
        .par_iter()
        .zip(labels)
        .map(|((name, inst), sol)| {
            spec.check(inst)?;
            Ok(Record {
                instance: name.clone(),
                method: sol.method.to_string(),
                features: encode_features(inst, codec),
                label: encode_label(inst, &sol.schedule, codec)?,
            })
        })
        .collect::<Result<_, CodecError>>()?;
    for r in records {
        ds.push(r)?;
    }
    Ok(ds)
}

/// Fresh network sized for the dataset's codec, trained with `hp`.
pub fn train_model(dataset: &Dataset, hp: &Hyperparams) -> Result<(Network, TrainReport), NeuroError> {
    let dims = layer_dims(dataset.spec.feature_len(), &hp.hidden, dataset.spec.label_len());
    let mut net = init_network(&dims, hp.seed)?;
    let report = train(&mut net, dataset, hp)?;
    Ok((net, report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub train_instances: usize,
    pub test_instances: usize,
    pub model_checksum: String,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub bench: BenchReport,
}

fn write_instances(dir: &Path, instances: &[(String, Instance)]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    for (name, inst) in instances {
        files::write_instance(&dir.join(format!("{name}.json")), inst)?;
    }
    Ok(())
}

/// Runs every stage, writing artifacts under `out`:
/// `train/`, `test/` (instances), `labels/`, `dataset.csv`, `model.json`,
/// `train_report.json`, `bench.{csv,json}` and `summary.json`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary, PipelineError> {
    std::fs::create_dir_all(out)?;
    let train_set = generate_corpus(&cfg.generator, cfg.seed, 0, cfg.train_instances)?;
    let test_set = generate_corpus(&cfg.generator, cfg.seed, cfg.train_instances, cfg.test_instances)?;
    write_instances(&out.join("train"), &train_set)?;
    write_instances(&out.join("test"), &test_set)?;
    log::info!("generated {} + {} instances", train_set.len(), test_set.len());

    let labels = label_corpus(&train_set, &cfg.label_limits);
    let label_dir = out.join("labels");
    std::fs::create_dir_all(&label_dir)?;
    for ((name, _), sol) in train_set.iter().zip(&labels) {
        if cfg.require_optimal_labels && !sol.optimal {
            return Err(PipelineError::NotOptimal(name.clone()));
        }
        files::write_schedule(&label_dir.join(format!("{name}.json")), &sol.schedule)?;
    }
    log::info!("labeled {} instances", labels.len());

    let dataset = build_dataset(&train_set, &labels, &cfg.codec)?;
    dataset.save(&out.join("dataset.csv"))?;
    let hp = Hyperparams {
        seed: cfg.seed,
        ..cfg.training.clone()
    };
    let (net, report) = train_model(&dataset, &hp)?;
    save_model(&net, &out.join("model.json"))?;
    files::write_json(&out.join("train_report.json"), &report)?;
    log::info!("trained model {}", report.checksum);

    let bench_cfg = BenchConfig {
        source: InstanceSource::Files {
            paths: vec![out.join("test").join("*.json").display().to_string()],
        },
        seed: cfg.seed,
        codec: cfg.codec,
        output: Some(out.join("bench")),
        model: Some(out.join("model.json")),
        ..cfg.bench.clone()
    };
    let ctx = SolverContext {
        ptas: bench_cfg.ptas,
        exact: bench_cfg.exact,
        network: Some(net),
        codec: cfg.codec,
        sort: bench_cfg.sort,
    };
    let bench = if test_set.is_empty() {
        BenchReport::from_rows(bench_cfg.reference, Vec::new(), &bench_cfg.methods)
    } else {
        run_benchmark_with(&bench_cfg, &ctx)?
    };
    let summary = PipelineSummary {
        train_instances: train_set.len(),
        test_instances: test_set.len(),
        model_checksum: report.checksum.clone(),
        final_train_loss: report.train_loss.last().copied().unwrap_or(f64::NAN),
        final_val_loss: report.val_loss.last().copied().unwrap_or(f64::NAN),
        bench,
    };
    files::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Paths of the artifacts a run writes, relative to its output directory.
pub fn artifact_paths(out: &Path) -> Vec<PathBuf> {
    ["dataset.csv", "dataset.csv.meta.json", "model.json", "train_report.json", "bench.csv", "bench.json", "summary.json"]
        .iter()
        .map(|f| out.join(f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Horizon;

    fn tiny() -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            generator: GenParams {
                num_users: 6,
                capacity_kw: 120.0,
                base_load_scale: 0.1,
                horizon: Horizon::new(12, 2.0),
                ..GenParams::default()
            },
            train_instances: 12,
            test_instances: 3,
            training: Hyperparams {
                epochs: 3,
                hidden: vec![8],
                ..Hyperparams::default()
            },
            bench: BenchConfig {
                methods: vec![Method::Exact, Method::GreedyU, Method::Dclevernet],
                repetitions: 1,
                warmup: false,
                ..BenchConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn end_to_end_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_pipeline(&tiny(), dir.path()).unwrap();
        assert_eq!(summary.train_instances, 12);
        for p in artifact_paths(dir.path()) {
            assert!(p.exists(), "{}", p.display());
        }
        assert_eq!(summary.bench.rows.len(), 9);
        assert!(summary.bench.rows.iter().all(|r| r.feasible));
    }

    #[test]
    fn corpus_is_seeded_per_index() {
        let p = tiny().generator;
        let a = generate_corpus(&p, 1, 0, 4).unwrap();
        let b = generate_corpus(&p, 1, 2, 2).unwrap();
        assert_eq!(a[2..], b[..]);
    }
}

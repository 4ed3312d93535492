//! Experiment orchestration: for each seed, generate a mask, run a method,
//! score it against the held-out truth, and emit machine-readable reports.
//!
//! `metrics.json` is fully determined by the experiment spec (wall-clock
//! timings go to a separate `timings.json` so byte-identical reruns stay
//! byte-identical).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::config::{Config, EmbeddingMode};
use crate::data::{self, Dataset, SchemaSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, CatEvalMode, MetricsReport, Prediction};
use crate::missing::{self, MaskMatrix, Mechanism};
use crate::train;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Ivgae {
        #[serde(default = "Config::desk")]
        config: Config,
    },
    Mean,
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
}

fn default_k() -> usize {
    5
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ivgae { .. } => "ivgae",
            Method::Mean => "mean",
            Method::Knn { .. } => "knn",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seeds: Vec<u64>,
    #[serde(flatten)]
    pub method: Method,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// MAR driver fraction / MNAR boost, when applicable.
    #[serde(default = "default_driver_frac")]
    pub mar_driver_frac: f64,
    #[serde(default = "default_boost")]
    pub mnar_boost: f64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_driver_frac() -> f64 {
    0.3
}
fn default_boost() -> f64 {
    3.0
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must be non-empty".into()));
        }
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return Err(Error::Config(format!(
                "rate must lie in (0,1), got {}",
                self.rate
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_column: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_avg_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_abs_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
    #[serde(skip)]
    pub report: Option<MetricsReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Option<Aggregate>,
}

/// Generates the mask for one cell of the experiment grid.
pub fn make_mask(
    d: &Dataset,
    mechanism: Mechanism,
    rate: f64,
    seed: u64,
    driver_frac: f64,
    boost: f64,
) -> Result<MaskMatrix> {
    match mechanism {
        Mechanism::Mcar => missing::gen_mcar(d, rate, seed),
        Mechanism::Mar => missing::gen_mar(d, rate, seed, driver_frac),
        Mechanism::Mnar => missing::gen_mnar(d, rate, seed, boost),
    }
}

/// Runs one method against one mask, returning the imputed table, the
/// metrics, and which categorical evaluation mode applies.
pub fn run_method(
    method: &Method,
    truth: &Dataset,
    mask: &MaskMatrix,
    mut ivgae_seed: Option<u64>,
) -> Result<(Dataset, MetricsReport)> {
    match method {
        Method::Mean => {
            let imputed = baselines::baseline_mean_mode(truth, mask)?;
            let report =
                metrics::avg_err(truth, &Prediction::plain(&imputed), mask, CatEvalMode::Onehot)?;
            Ok((imputed, report))
        }
        Method::Knn { k } => {
            let imputed = baselines::baseline_knn(truth, mask, *k)?;
            let report =
                metrics::avg_err(truth, &Prediction::plain(&imputed), mask, CatEvalMode::Onehot)?;
            Ok((imputed, report))
        }
        Method::Ivgae { config } => {
            let mut cfg = *config;
            if let Some(seed) = ivgae_seed.take() {
                cfg.train.seed = seed;
            }
            let (_state, filled) = train::train(truth, mask, &cfg, None)?;
            let mode = match cfg.embedding.mode {
                EmbeddingMode::Hetero => CatEvalMode::Hetero,
                EmbeddingMode::Onehot => CatEvalMode::Onehot,
            };
            let report = metrics::avg_err(truth, &Prediction::from(&filled), mask, mode)?;
            Ok((filled.data, report))
        }
    }
}

fn worker_count(n_tasks: usize) -> usize {
    let cap = std::env::var("IVGAE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1);
    let hw = std::thread::available_parallelism()
        .map(std::num::NonZeroUsize::get)
        .unwrap_or(1);
    cap.unwrap_or(hw).min(n_tasks).max(1)
}

/// Runs every seed of the spec (seeds execute in parallel worker threads;
/// each cell is deterministic, and report assembly is single-writer in seed
/// order). Writes `metrics.json`, `timings.json`, per-seed imputed CSVs, and
/// a tidy long-format `results.csv`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let schema = match &spec.schema {
        Some(p) => Some(SchemaSpec::from_json_file(p)?),
        None => None,
    };
    let truth = data::load_csv(&spec.dataset, schema.as_ref())?;
    std::fs::create_dir_all(&spec.out_dir)?;

    let tasks: Vec<u64> = spec.seeds.clone();
    let workers = worker_count(tasks.len());
    let results: Vec<Option<(SeedResult, Option<Dataset>)>> =
        (0..tasks.len()).map(|_| None).collect();

    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mx = std::sync::Mutex::new(results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= tasks.len() {
                    break;
                }
                let seed = tasks[idx];
                let started = std::time::Instant::now();
                let outcome = make_mask(
                    &truth,
                    spec.mechanism,
                    spec.rate,
                    seed,
                    spec.mar_driver_frac,
                    spec.mnar_boost,
                )
                .and_then(|mask| {
                    run_method(&spec.method, &truth, &mask, Some(seed))
                        .map(|(imputed, report)| (imputed, report))
                });
                let seconds = started.elapsed().as_secs_f64();
                let entry = match outcome {
                    Ok((imputed, report)) => (
                        SeedResult {
                            seed,
                            status: "ok".into(),
                            per_column: Some(
                                report
                                    .per_column
                                    .iter()
                                    .map(|c| (c.column.clone(), c.avg_err))
                                    .collect(),
                            ),
                            macro_avg_err: Some(report.macro_avg_err),
                            macro_abs_err: Some(report.macro_abs_err),
                            error: None,
                            seconds,
                            report: Some(report),
                        },
                        Some(imputed),
                    ),
                    Err(e) => (
                        SeedResult {
                            seed,
                            status: "failed".into(),
                            per_column: None,
                            macro_avg_err: None,
                            macro_abs_err: None,
                            error: Some(e.to_string()),
                            seconds,
                            report: None,
                        },
                        None,
                    ),
                };
                results_mx.lock().expect("no poisoned worker")[idx] = Some(entry);
            });
        }
    });
    let results = results_mx.into_inner().expect("workers finished");

    let mut per_seed = Vec::with_capacity(tasks.len());
    for (i, slot) in results.into_iter().enumerate() {
        let (entry, imputed) = slot.expect("worker filled every slot");
        if let Some(imputed) = imputed {
            let path = spec.out_dir.join(format!(
                "imputed_{}_{}_{}_{}.csv",
                spec.method.name(),
                spec.mechanism,
                spec.rate,
                tasks[i]
            ));
            imputed.write_csv(&path)?;
        }
        per_seed.push(entry);
    }

    let macros: Vec<f64> = per_seed.iter().filter_map(|s| s.macro_avg_err).collect();
    let aggregate = if macros.is_empty() {
        None
    } else {
        let mean = macros.iter().sum::<f64>() / macros.len() as f64;
        let var =
            macros.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / macros.len() as f64;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            n: macros.len(),
        })
    };
    let report = ExperimentReport {
        spec: spec.clone(),
        per_seed,
        aggregate,
    };

    std::fs::write(
        spec.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let timings: BTreeMap<u64, f64> = report
        .per_seed
        .iter()
        .map(|s| (s.seed, s.seconds))
        .collect();
    std::fs::write(
        spec.out_dir.join("timings.json"),
        serde_json::to_string_pretty(&timings)?,
    )?;
    write_tidy_csv(&report, &spec.out_dir.join("results.csv"))?;
    Ok(report)
}

/// Long-format rows: mechanism, rate, seed, method, column, avg_err.
fn write_tidy_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mechanism", "rate", "seed", "method", "column", "avg_err"])?;
    for seed_result in &report.per_seed {
        if let Some(cols) = &seed_result.per_column {
            for (col, err) in cols {
                w.write_record([
                    report.spec.mechanism.to_string(),
                    report.spec.rate.to_string(),
                    seed_result.seed.to_string(),
                    report.spec.method.name().to_string(),
                    col.clone(),
                    err.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

//! Experiment orchestration behind the command-line tool.
//!
//! A sweep trains one model per `(omega1, omega2, seed)` on a single
//! generated dataset, keeps each run's best-validation checkpoint, evaluates
//! it on the test split and aggregates mean and sample standard deviation
//! across seeds. Runs execute on a bounded worker pool; results are collected
//! in grid order before anything is written, so outputs do not depend on
//! scheduling. The only wall-clock value written anywhere is the
//! `created_unix` field of `metadata.json`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{parse_spec, ConstraintSpec};
use crate::error::{Error, Result};
use crate::losses::RegMode;
use crate::metrics::{dataset_report, read_predictions, InconsistencyReport};
use crate::synthdata::{prepare, read_dataset, write_dataset, GenConfig, TrainingData};
use crate::trainer::{evaluate, train, train_with_trace, TrainConfig};

/// Environment variable holding the default number of concurrent runs.
pub const JOBS_ENV: &str = "CONSISTENT_EVIDENCE_JOBS";

/// Coefficients bracketing the range used for the tradeoff grid.
pub const DEFAULT_SWEEP_VALUES: [f64; 5] = [0.0, 1.0, 3.0, 10.0, 30.0];

/// The diagonal points of the performance/consistency table.
pub const TABLE_GRID: [(f64, f64); 4] = [(0.0, 0.0), (3.0, 3.0), (10.0, 6.0), (30.0, 10.0)];

/// An inline value or a path to a JSON file holding it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Source<T> {
    Path(String),
    Inline(T),
}

impl<T: serde::de::DeserializeOwned + Clone> Source<T> {
    fn load(&self, base: &Path) -> Result<T> {
        match self {
            Source::Inline(v) => Ok(v.clone()),
            Source::Path(p) => {
                let text = std::fs::read_to_string(base.join(p))?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

/// Experiment config file. `gen` reads `spec` and `gen`; `sweep` reads
/// everything.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    /// Path to a constraint document; the edema spec when absent.
    #[serde(default)]
    pub spec: Option<String>,
    #[serde(default)]
    pub gen: Option<Source<GenConfig>>,
    #[serde(default)]
    pub train: Option<Source<TrainConfig>>,
    #[serde(default)]
    pub mode: RegMode,
    /// Explicit grid points; takes precedence over `values`.
    #[serde(default)]
    pub points: Option<Vec<(f64, f64)>>,
    /// Every pair from this list is run when `points` is absent.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    /// Overrides the seeds of the train config.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub parallelism: Option<usize>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_spec(path: &Path) -> Result<ConstraintSpec> {
    parse_spec(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub spec: ConstraintSpec,
    pub points: Vec<(f64, f64)>,
    pub mode: RegMode,
    pub seeds: Vec<u64>,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub parallelism: Option<usize>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidConfig("sweep grid has no points".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("sweep grid has no seeds".into()));
        }
        if let Some(&(a, b)) = self.points.iter().find(|(a, b)| !(a.is_finite() && b.is_finite() && *a >= 0.0 && *b >= 0.0)) {
            return Err(Error::InvalidConfig(format!("grid point ({a}, {b})")));
        }
        self.gen.validate(&self.spec)?;
        self.train.validate(&self.spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ExperimentFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = base_dir(path);
        let spec = match &file.spec {
            Some(p) => load_spec(&base.join(p))?,
            None => ConstraintSpec::edema(),
        };
        let gen = file.gen.as_ref().map(|g| g.load(&base)).transpose()?.unwrap_or_default();
        let train = file.train.as_ref().map(|t| t.load(&base)).transpose()?.unwrap_or_default();
        let points = match (&file.points, &file.values) {
            (Some(p), _) => p.clone(),
            (None, Some(v)) => full_grid(v),
            (None, None) => full_grid(&DEFAULT_SWEEP_VALUES),
        };
        let grid = SweepGrid {
            spec,
            points,
            mode: file.mode,
            seeds: file.seeds.clone().unwrap_or_else(|| train.seeds.clone()),
            gen,
            train,
            parallelism: file.parallelism,
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// Every `(a, b)` with both coordinates drawn from `values`, row-major.
pub fn full_grid(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().flat_map(|&a| values.iter().map(move |&b| (a, b))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub omega1: f64,
    pub omega2: f64,
    pub mode: RegMode,
    pub seed: u64,
    pub r1: f64,
    pub r2: f64,
    pub acc_y: f64,
    pub auc_y: f64,
    pub acc_z: Vec<f64>,
    pub r1_by_class: Vec<f64>,
    pub r2_by_class: Vec<f64>,
    pub best_step: usize,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub omega1: f64,
    pub omega2: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample (n - 1) standard deviation; the deviation of a single
/// value is 0.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub omega1: f64,
    pub omega2: f64,
    pub mode: RegMode,
    pub n: usize,
    pub r1: MeanStd,
    pub r2: MeanStd,
    pub acc_y: MeanStd,
    pub auc_y: MeanStd,
    pub acc_z: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub mode: RegMode,
    pub evidence_names: Vec<String>,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<RunFailure>,
}

impl SweepResult {
    pub fn aggregate_at(&self, omega1: f64, omega2: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.omega1 == omega1 && a.omega2 == omega2)
    }

    pub fn rows_at(&self, omega1: f64, omega2: f64) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(move |r| r.omega1 == omega1 && r.omega2 == omega2)
    }
}

/// Aggregates per grid point, in order of first appearance.
pub fn aggregate(rows: &[RunRow]) -> Vec<Aggregate> {
    let mut order: Vec<(f64, f64, RegMode)> = Vec::new();
    for r in rows {
        let key = (r.omega1, r.omega2, r.mode);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(omega1, omega2, mode)| {
            let group: Vec<&RunRow> = rows
                .iter()
                .filter(|r| r.omega1 == omega1 && r.omega2 == omega2 && r.mode == mode)
                .collect();
            let stat = |f: &dyn Fn(&RunRow) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let k = group[0].acc_z.len();
            Aggregate {
                omega1,
                omega2,
                mode,
                n: group.len(),
                r1: stat(&|r| r.r1),
                r2: stat(&|r| r.r2),
                acc_y: stat(&|r| r.acc_y),
                auc_y: stat(&|r| r.auc_y),
                acc_z: (0..k).map(|i| stat(&|r| r.acc_z[i])).collect(),
            }
        })
        .collect()
}

/// Trains one model and evaluates its best checkpoint on the test split.
pub fn run_point(
    data: &TrainingData,
    spec: &ConstraintSpec,
    base: &TrainConfig,
    omega1: f64,
    omega2: f64,
    mode: RegMode,
    seed: u64,
) -> Result<RunRow> {
    let mut config = base.clone();
    config.loss.omega1 = omega1;
    config.loss.omega2 = omega2;
    config.loss.mode = mode;
    let outcome = train(data, spec, &config, seed)?;
    let metrics = evaluate(&outcome.best.params, &data.test, spec)?;
    Ok(RunRow {
        omega1,
        omega2,
        mode,
        seed,
        r1: metrics.report.r1_total,
        r2: metrics.report.r2_total,
        acc_y: metrics.acc_y,
        auc_y: metrics.auc_y,
        acc_z: metrics.acc_z,
        r1_by_class: metrics.report.r1_by_class,
        r2_by_class: metrics.report.r2_by_class,
        best_step: outcome.best.step,
        validation_accuracy: outcome.best.validation_accuracy,
    })
}

pub fn default_parallelism() -> usize {
    std::env::var(JOBS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every `(point, seed)` of the grid. Individual run failures are
/// recorded in the result rather than aborting the sweep.
pub fn run_sweep(grid: &SweepGrid, jobs: Option<usize>) -> Result<SweepResult> {
    grid.validate()?;
    let data = prepare(&grid.spec, &grid.gen)?;
    let jobs = jobs.or(grid.parallelism).unwrap_or_else(default_parallelism).max(1);
    let tasks: Vec<((f64, f64), u64)> = grid
        .points
        .iter()
        .flat_map(|&p| grid.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<RunRow>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&((a, b), seed)| run_point(&data, &grid.spec, &grid.train, a, b, grid.mode, seed))
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&((omega1, omega2), seed), outcome) in tasks.iter().zip(outcomes) {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(RunFailure {
                omega1,
                omega2,
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(SweepResult {
        mode: grid.mode,
        evidence_names: grid.spec.evidence_names().to_vec(),
        aggregates: aggregate(&rows),
        rows,
        failures,
    })
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-run CSV: `omega1,omega2,mode,seed,r1,r2,acc_y,auc_y,acc_z0..acc_z{K-1}`.
pub fn runs_csv(rows: &[RunRow], num_evidence: usize) -> Result<String> {
    csv_string(|w| {
        let mut header: Vec<String> = ["omega1", "omega2", "mode", "seed", "r1", "r2", "acc_y", "auc_y"]
            .map(String::from)
            .to_vec();
        header.extend((0..num_evidence).map(|k| format!("acc_z{k}")));
        w.write_record(&header)?;
        for r in rows {
            let mut rec = vec![
                r.omega1.to_string(),
                r.omega2.to_string(),
                r.mode.to_string(),
                r.seed.to_string(),
                r.r1.to_string(),
                r.r2.to_string(),
                r.acc_y.to_string(),
                r.auc_y.to_string(),
            ];
            rec.extend(r.acc_z.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

/// Aggregate CSV: the per-run columns as `<metric>_mean,<metric>_std` pairs
/// plus the seed count `n`.
pub fn aggregates_csv(aggs: &[Aggregate], num_evidence: usize) -> Result<String> {
    csv_string(|w| {
        let mut header: Vec<String> = ["omega1", "omega2", "mode", "n"].map(String::from).to_vec();
        let metrics: Vec<String> = ["r1", "r2", "acc_y", "auc_y"]
            .map(String::from)
            .into_iter()
            .chain((0..num_evidence).map(|k| format!("acc_z{k}")))
            .collect();
        for m in &metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_std"));
        }
        w.write_record(&header)?;
        for a in aggs {
            let mut rec = vec![a.omega1.to_string(), a.omega2.to_string(), a.mode.to_string(), a.n.to_string()];
            for s in [a.r1, a.r2, a.acc_y, a.auc_y].iter().chain(&a.acc_z) {
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

fn write_metadata(dir: &Path, command: &str) -> Result<()> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
    });
    write_file(&dir.join("metadata.json"), &serde_json::to_string_pretty(&meta)?)
}

/// Writes `result.json`, `runs.csv`, `aggregate.csv`, the three slice files
/// (`slice_vary_omega1.csv` at omega2 = 0, `slice_vary_omega2.csv` at
/// omega1 = 0, `slice_diagonal.csv` at omega1 = omega2) when they are
/// nonempty, and `failures.csv` when any run failed.
pub fn write_sweep(result: &SweepResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let k = result.evidence_names.len();
    write_file(&out.join("result.json"), &serde_json::to_string_pretty(result)?)?;
    write_file(&out.join("runs.csv"), &runs_csv(&result.rows, k)?)?;
    write_file(&out.join("aggregate.csv"), &aggregates_csv(&result.aggregates, k)?)?;
    let slices: [(&str, fn(&Aggregate) -> bool); 3] = [
        ("slice_vary_omega1.csv", |a| a.omega2 == 0.0),
        ("slice_vary_omega2.csv", |a| a.omega1 == 0.0),
        ("slice_diagonal.csv", |a| a.omega1 == a.omega2),
    ];
    for (name, keep) in slices {
        let sel: Vec<Aggregate> = result.aggregates.iter().filter(|a| keep(a)).cloned().collect();
        if !sel.is_empty() {
            write_file(&out.join(name), &aggregates_csv(&sel, k)?)?;
        }
    }
    if !result.failures.is_empty() {
        let text = csv_string(|w| {
            w.write_record(["omega1", "omega2", "seed", "error"])?;
            for f in &result.failures {
                w.write_record([f.omega1.to_string(), f.omega2.to_string(), f.seed.to_string(), f.error.clone()])?;
            }
            Ok(())
        })?;
        write_file(&out.join("failures.csv"), &text)?;
    }
    write_metadata(out, "sweep")
}

pub fn cmd_sweep(grid_path: &Path, out: &Path, jobs: Option<usize>) -> Result<SweepResult> {
    let grid = SweepGrid::load(grid_path)?;
    let result = run_sweep(&grid, jobs)?;
    write_sweep(&result, out)?;
    Ok(result)
}

/// Writes `report.json` and `report.csv` for a predictions file.
pub fn cmd_validate(spec_path: &Path, predictions: &Path, out: &Path) -> Result<InconsistencyReport> {
    let spec = load_spec(spec_path)?;
    let records = read_predictions(predictions, &spec)?;
    let report = dataset_report(&spec, &records)?;
    std::fs::create_dir_all(out)?;
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_file(&out.join("report.csv"), &report.to_csv()?)?;
    Ok(report)
}

/// Generates a dataset from an experiment file and writes it as JSON lines.
pub fn cmd_gen(config_path: &Path, out: &Path) -> Result<TrainingData> {
    let file: ExperimentFile = serde_json::from_str(&std::fs::read_to_string(config_path)?)?;
    let base = base_dir(config_path);
    let spec = match &file.spec {
        Some(p) => load_spec(&base.join(p))?,
        None => ConstraintSpec::edema(),
    };
    let gen = file.gen.as_ref().map(|g| g.load(&base)).transpose()?.unwrap_or_default();
    let data = prepare(&spec, &gen)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    write_dataset(&data, &mut f)?;
    f.flush()?;
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub spec: PathBuf,
    pub data: PathBuf,
    pub config: PathBuf,
    pub omega1: f64,
    pub omega2: f64,
    pub mode: RegMode,
    pub seed: u64,
    pub out: PathBuf,
}

/// Trains one model, streaming the trace to `trace.jsonl`, then writes the
/// best checkpoint (`checkpoint.json`), its test metrics (`metrics.json`)
/// and the test partition report (`report.csv`).
pub fn cmd_train(args: &TrainArgs) -> Result<crate::trainer::EvalMetrics> {
    let spec = load_spec(&args.spec)?;
    let data = read_dataset(&args.data, &spec)?;
    let mut config: TrainConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)?;
    config.loss.omega1 = args.omega1;
    config.loss.omega2 = args.omega2;
    config.loss.mode = args.mode;
    std::fs::create_dir_all(&args.out)?;
    let mut trace = std::io::BufWriter::new(std::fs::File::create(args.out.join("trace.jsonl"))?);
    let outcome = train_with_trace(&data, &spec, &config, args.seed, |entry| {
        serde_json::to_writer(&mut trace, entry)?;
        trace.write_all(b"\n")?;
        trace.flush()?;
        Ok(())
    })?;
    drop(trace);
    let metrics = evaluate(&outcome.best.params, &data.test, &spec)?;
    write_file(&args.out.join("checkpoint.json"), &serde_json::to_string(&outcome.best)?)?;
    write_file(&args.out.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    write_file(&args.out.join("report.csv"), &metrics.report.to_csv()?)?;
    write_metadata(&args.out, "train")?;
    Ok(metrics)
}

fn load_result(path: &Path) -> Result<SweepResult> {
    let file = if path.is_dir() { path.join("result.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", file.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Aligns several sweep results point by point.
///
/// Columns are `omega1,omega2`, then `<label>_r1,<label>_r2,<label>_acc_y`
/// (seed means) for every input, then
/// `delta_r1_<label>,delta_r2_<label>,delta_acc_y_<label>` for every input
/// after the first, each the difference from the first input. Labels are
/// the regularizer modes, suffixed with the input position when repeated.
pub fn merge_results(results: &[(String, SweepResult)]) -> Result<String> {
    let Some((_, reference)) = results.first() else {
        return Err(Error::Empty("sweep results"));
    };
    let mut labels: Vec<String> = Vec::new();
    for (i, (_, r)) in results.iter().enumerate() {
        let base = r.mode.to_string();
        let label = if results.iter().filter(|(_, o)| o.mode == r.mode).count() > 1 {
            format!("{base}_{i}")
        } else {
            base
        };
        labels.push(label);
    }
    let mut points: Vec<(f64, f64)> = reference.aggregates.iter().map(|a| (a.omega1, a.omega2)).collect();
    for (_, r) in &results[1..] {
        for a in &r.aggregates {
            if !points.contains(&(a.omega1, a.omega2)) {
                points.push((a.omega1, a.omega2));
            }
        }
    }
    let mut table: BTreeMap<usize, Vec<&crate::harness::Aggregate>> = BTreeMap::new();
    for (pi, &(a, b)) in points.iter().enumerate() {
        for (name, r) in results {
            let agg = r.aggregate_at(a, b).ok_or_else(|| Error::MissingGridPoint {
                omega1: a,
                omega2: b,
                source_name: name.clone(),
            })?;
            table.entry(pi).or_default().push(agg);
        }
    }
    csv_string(|w| {
        let mut header = vec!["omega1".to_string(), "omega2".to_string()];
        for l in &labels {
            header.extend([format!("{l}_r1"), format!("{l}_r2"), format!("{l}_acc_y")]);
        }
        for l in &labels[1..] {
            header.extend([format!("delta_r1_{l}"), format!("delta_r2_{l}"), format!("delta_acc_y_{l}")]);
        }
        w.write_record(&header)?;
        for (pi, &(a, b)) in points.iter().enumerate() {
            let aggs = &table[&pi];
            let mut rec = vec![a.to_string(), b.to_string()];
            for g in aggs {
                rec.extend([g.r1.mean.to_string(), g.r2.mean.to_string(), g.acc_y.mean.to_string()]);
            }
            let first = aggs[0];
            for g in &aggs[1..] {
                rec.extend([
                    (g.r1.mean - first.r1.mean).to_string(),
                    (g.r2.mean - first.r2.mean).to_string(),
                    (g.acc_y.mean - first.acc_y.mean).to_string(),
                ]);
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let results = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), load_result(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let text = merge_results(&results)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_file(out, &text)?;
    Ok(text)
}

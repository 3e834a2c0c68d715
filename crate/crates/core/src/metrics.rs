//! Inconsistency measures on MAP predictions.
//!
//! Per example, the incompatibility count is the number of present evidence
//! labels that the predicted class forbids, and the insufficiency indicator
//! is 1 when none of the class's direct evidence is present. Dataset-level
//! measures average these over all records. Per-class partitions are divided
//! by the total record count, not the class count, so that the partitions
//! sum to the totals.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSpec, EvidenceVector};
use crate::error::{Error, Result};

/// Tolerance for the task block of a posterior summing to one.
pub const POSTERIOR_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub y_hat: usize,
    pub z_hat: EvidenceVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_true: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(y_hat: usize, z_hat: EvidenceVector) -> Self {
        PredictionRecord {
            y_hat,
            z_hat,
            y_true: None,
            posterior: None,
        }
    }

    pub fn validate(&self, spec: &ConstraintSpec) -> Result<()> {
        spec.check_class(self.y_hat)?;
        spec.check_evidence(&self.z_hat)?;
        if let Some(y) = self.y_true {
            spec.check_class(y)?;
        }
        if let Some(post) = &self.posterior {
            let c = spec.num_classes();
            let expected = c + spec.num_evidence();
            if post.len() != expected {
                return Err(Error::LengthMismatch {
                    what: "posterior",
                    expected,
                    got: post.len(),
                });
            }
            if let Some(p) = post.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::ProbabilityOutOfRange(*p));
            }
            let task_sum: f64 = post[..c].iter().sum();
            if (task_sum - 1.0).abs() > POSTERIOR_SUM_TOL {
                return Err(Error::InvalidPosterior(format!(
                    "task block sums to {task_sum}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyReport {
    pub n: usize,
    pub r1_total: f64,
    pub r2_total: f64,
    pub r1_by_class: Vec<f64>,
    pub r2_by_class: Vec<f64>,
    pub r1_normalized_total: f64,
}

impl InconsistencyReport {
    /// CSV with columns `class,r1,r2`, one row per class and a trailing
    /// `total` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "r1", "r2"])?;
        for (c, (r1, r2)) in self.r1_by_class.iter().zip(&self.r2_by_class).enumerate() {
            w.write_record([c.to_string(), r1.to_string(), r2.to_string()])?;
        }
        w.write_record([
            "total".to_string(),
            self.r1_total.to_string(),
            self.r2_total.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Number of present evidence labels incompatible with `y`.
pub fn r1_example(spec: &ConstraintSpec, y: usize, z: &EvidenceVector) -> Result<usize> {
    spec.check_class(y)?;
    spec.check_evidence(z)?;
    Ok(spec.incompatible(y).iter().filter(|&&k| z.is_present(k)).count())
}

/// 1 when `y` has direct evidence and none of it is present, else 0.
pub fn r2_example(spec: &ConstraintSpec, y: usize, z: &EvidenceVector) -> Result<usize> {
    spec.check_class(y)?;
    spec.check_evidence(z)?;
    let direct = spec.direct_support(y);
    if direct.is_empty() {
        return Ok(0);
    }
    Ok(usize::from(!direct.iter().any(|&k| z.is_present(k))))
}

pub fn dataset_report(spec: &ConstraintSpec, records: &[PredictionRecord]) -> Result<InconsistencyReport> {
    if records.is_empty() {
        return Err(Error::Empty("prediction records"));
    }
    let c = spec.num_classes();
    let mut r1_counts = vec![0usize; c];
    let mut r2_counts = vec![0usize; c];
    let mut normalized = 0.0;
    for rec in records {
        let r1 = r1_example(spec, rec.y_hat, &rec.z_hat)?;
        let r2 = r2_example(spec, rec.y_hat, &rec.z_hat)?;
        r1_counts[rec.y_hat] += r1;
        r2_counts[rec.y_hat] += r2;
        let size = spec.incompatible(rec.y_hat).len();
        if size > 0 {
            normalized += r1 as f64 / size as f64;
        }
    }
    let n = records.len();
    let nf = n as f64;
    Ok(InconsistencyReport {
        n,
        r1_total: r1_counts.iter().sum::<usize>() as f64 / nf,
        r2_total: r2_counts.iter().sum::<usize>() as f64 / nf,
        r1_by_class: r1_counts.iter().map(|&v| v as f64 / nf).collect(),
        r2_by_class: r2_counts.iter().map(|&v| v as f64 / nf).collect(),
        r1_normalized_total: normalized / nf,
    })
}

fn check_probabilities(spec: &ConstraintSpec, probs: &[f64]) -> Result<()> {
    if probs.len() != spec.num_evidence() {
        return Err(Error::LengthMismatch {
            what: "evidence probabilities",
            expected: spec.num_evidence(),
            got: probs.len(),
        });
    }
    match probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(&p) => Err(Error::ProbabilityOutOfRange(p)),
        None => Ok(()),
    }
}

/// Exact probabilities of (some incompatible finding present, no direct
/// finding present) under independent Bernoulli evidence.
///
/// The insufficiency probability is the literal one: a class with no direct
/// evidence gets probability 1 (empty product), unlike [`r2_example`], which
/// exempts such classes.
pub fn exact_inconsistency_probability(
    spec: &ConstraintSpec,
    y: usize,
    probs: &[f64],
) -> Result<(f64, f64)> {
    spec.check_class(y)?;
    check_probabilities(spec, probs)?;
    let none_incompatible: f64 = spec.incompatible(y).iter().map(|&k| 1.0 - probs[k]).product();
    let none_direct: f64 = spec.direct_support(y).iter().map(|&k| 1.0 - probs[k]).product();
    Ok((1.0 - none_incompatible, none_direct))
}

/// Additive upper bound on the incompatibility probability.
pub fn union_bound(spec: &ConstraintSpec, y: usize, probs: &[f64]) -> Result<f64> {
    spec.check_class(y)?;
    check_probabilities(spec, probs)?;
    Ok(spec.incompatible(y).iter().map(|&k| probs[k]).sum())
}

/// Upper bound on the insufficiency probability: the smallest absence
/// probability among direct findings (1 for an empty set).
pub fn min_bound(spec: &ConstraintSpec, y: usize, probs: &[f64]) -> Result<f64> {
    spec.check_class(y)?;
    check_probabilities(spec, probs)?;
    Ok(spec
        .direct_support(y)
        .iter()
        .map(|&k| 1.0 - probs[k])
        .fold(1.0, f64::min))
}

/// Reads a JSON-lines predictions file, validating each record against the
/// spec. Blank lines are skipped; errors carry 1-based line numbers.
pub fn read_predictions(path: &Path, spec: &ConstraintSpec) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path)?;
    let display = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let rec: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate(spec).map_err(|e| parse_err(e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

//! Synthetic datasets with label structure that follows a constraint spec.
//!
//! Each example draws a class from the prior, then builds its evidence so
//! that the tuple is consistent by construction: incompatible findings are
//! absent, one direct finding (if the class has any) is present, and every
//! other allowed finding appears independently with probability `p_extra`.
//! Features are linear in the labels plus isotropic Gaussian noise,
//! `x = a A onehot(y) + b B (z + 1) / 2 + eps`, with `A` and `B` standard
//! normal and drawn once per seed, and `a`, `b` the configured scales.
//!
//! Training data is exposed only as single-label pairs `(x, y)` or
//! `(x, z_k)`, mirroring a setting where full tuples are never observed.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSpec, EvidenceVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub input_dim: usize,
    /// Uniform when absent.
    pub class_prior: Option<Vec<f64>>,
    pub p_extra: f64,
    /// Multiplies the class embedding `A`.
    pub class_scale: f64,
    /// Multiplies the evidence embedding `B`.
    pub evidence_scale: f64,
    pub noise_sigma: f64,
    pub p_task_label: f64,
    pub p_evidence_label: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 4096,
            n_validation: 512,
            n_test: 512,
            input_dim: 16,
            class_prior: None,
            p_extra: 0.3,
            class_scale: 2.0,
            evidence_scale: 1.0,
            noise_sigma: 2.5,
            p_task_label: 1.0,
            p_evidence_label: 0.3,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn prior(&self, spec: &ConstraintSpec) -> Vec<f64> {
        match &self.class_prior {
            Some(p) => p.clone(),
            None => vec![1.0 / spec.num_classes() as f64; spec.num_classes()],
        }
    }

    pub fn validate(&self, spec: &ConstraintSpec) -> Result<()> {
        let probability = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        probability("p_extra", self.p_extra)?;
        probability("p_task_label", self.p_task_label)?;
        probability("p_evidence_label", self.p_evidence_label)?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and nonnegative, got {}",
                self.noise_sigma
            )));
        }
        for (name, v) in [("class_scale", self.class_scale), ("evidence_scale", self.evidence_scale)] {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be finite, got {v}")));
            }
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        let prior = self.prior(spec);
        if prior.len() != spec.num_classes() {
            return Err(Error::LengthMismatch {
                what: "class prior",
                expected: spec.num_classes(),
                got: prior.len(),
            });
        }
        for &p in &prior {
            probability("class prior entry", p)?;
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("class prior sums to {total}")));
        }
        Ok(())
    }
}

/// A fully labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub z: EvidenceVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Task(usize),
    Evidence { index: usize, value: i8 },
}

/// A feature vector with exactly one label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub example_id: usize,
    pub x: Vec<f64>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

/// What training actually sees: single-label training pairs plus fully
/// labelled evaluation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<LabeledPair>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// Draws one consistent evidence vector for class `y`.
fn sample_evidence(spec: &ConstraintSpec, y: usize, p_extra: f64, rng: &mut impl Rng) -> EvidenceVector {
    let k_total = spec.num_evidence();
    let mut z = EvidenceVector::absent(k_total);
    let direct = spec.direct_support(y);
    let chosen = if direct.is_empty() {
        None
    } else {
        Some(direct[rng.random_range(0..direct.len())])
    };
    if let Some(k) = chosen {
        z.set(k, true);
    }
    let forbidden = spec.incompatible(y);
    for k in 0..k_total {
        if Some(k) == chosen || forbidden.contains(&k) {
            continue;
        }
        let u: f64 = rng.random();
        if u < p_extra {
            z.set(k, true);
        }
    }
    z
}

pub fn generate(spec: &ConstraintSpec, config: &GenConfig) -> Result<Dataset> {
    config.validate(spec)?;
    let (c, k, d) = (spec.num_classes(), spec.num_evidence(), config.input_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    // column-major: class_embed[c] and evidence_embed[k] are length-d columns
    let class_embed: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    let evidence_embed: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    let prior = WeightedIndex::new(config.prior(spec))
        .map_err(|e| Error::InvalidConfig(format!("class prior: {e}")))?;

    let mut next_id = 0;
    let mut split = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let y = prior.sample(rng);
                let z = sample_evidence(spec, y, config.p_extra, rng);
                let mut x: Vec<f64> = class_embed[y].iter().map(|a| config.class_scale * a).collect();
                for kk in z.present() {
                    for (xi, bi) in x.iter_mut().zip(&evidence_embed[kk]) {
                        *xi += config.evidence_scale * bi;
                    }
                }
                for xi in x.iter_mut() {
                    *xi += config.noise_sigma * normal(rng);
                }
                let id = next_id;
                next_id += 1;
                Example { id, x, y, z }
            })
            .collect()
    };
    let train = split(config.n_train, &mut rng);
    let validation = split(config.n_validation, &mut rng);
    let test = split(config.n_test, &mut rng);
    Ok(Dataset { train, validation, test })
}

/// Splits full tuples into single-label pairs: the task label is kept with
/// probability `p_task_label` and each evidence label independently with
/// probability `p_evidence_label`.
pub fn make_pairs(split: &[Example], config: &GenConfig) -> Result<Vec<LabeledPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut pairs = Vec::new();
    for ex in split {
        let u: f64 = rng.random();
        if u < config.p_task_label {
            pairs.push(LabeledPair {
                example_id: ex.id,
                x: ex.x.clone(),
                label: Label::Task(ex.y),
            });
        }
        for (index, &value) in ex.z.values().iter().enumerate() {
            let u: f64 = rng.random();
            if u < config.p_evidence_label {
                pairs.push(LabeledPair {
                    example_id: ex.id,
                    x: ex.x.clone(),
                    label: Label::Evidence { index, value },
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("labelled pairs"));
    }
    Ok(pairs)
}

/// [`generate`] followed by [`make_pairs`] on the training split.
pub fn prepare(spec: &ConstraintSpec, config: &GenConfig) -> Result<TrainingData> {
    let data = generate(spec, config)?;
    let train = make_pairs(&data.train, config)?;
    Ok(TrainingData {
        train,
        validation: data.validation,
        test: data.test,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetLine {
    split: SplitTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<usize>,
    x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<BTreeMap<String, i64>>,
}

fn full_z(z: &EvidenceVector) -> BTreeMap<String, i64> {
    z.values().iter().enumerate().map(|(k, &v)| (k.to_string(), i64::from(v))).collect()
}

/// Writes the dataset as JSON lines: one line per training pair, one line
/// per fully labelled evaluation example.
pub fn write_dataset(data: &TrainingData, out: &mut impl Write) -> Result<()> {
    for pair in &data.train {
        let (y, z) = match pair.label {
            Label::Task(y) => (Some(y), None),
            Label::Evidence { index, value } => {
                (None, Some(BTreeMap::from([(index.to_string(), i64::from(value))])))
            }
        };
        let line = DatasetLine {
            split: SplitTag::Train,
            id: Some(pair.example_id),
            x: pair.x.clone(),
            y,
            z,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    for (tag, split) in [(SplitTag::Validation, &data.validation), (SplitTag::Test, &data.test)] {
        for ex in split {
            let line = DatasetLine {
                split: tag,
                id: Some(ex.id),
                x: ex.x.clone(),
                y: Some(ex.y),
                z: Some(full_z(&ex.z)),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a JSON-lines dataset file. Training lines may carry any subset of
/// labels (each becomes one pair); evaluation lines must carry `y` and all
/// `K` evidence labels.
pub fn read_dataset(path: &Path, spec: &ConstraintSpec) -> Result<TrainingData> {
    let file = std::fs::File::open(path)?;
    let display = path.display().to_string();
    let mut data = TrainingData {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let mut dim: Option<usize> = None;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: display.clone(),
            line: i + 1,
            message,
        };
        let rec: DatasetLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        match dim {
            Some(d) if d != rec.x.len() => {
                return Err(err(format!("feature dimension {} differs from {d}", rec.x.len())))
            }
            _ => dim = Some(rec.x.len()),
        }
        let id = rec.id.unwrap_or(i);
        if let Some(y) = rec.y {
            spec.check_class(y).map_err(|e| err(e.to_string()))?;
        }
        let mut zs = Vec::new();
        for (key, &value) in rec.z.iter().flatten() {
            let k: usize = key.parse().map_err(|_| err(format!("evidence key `{key}`")))?;
            if k >= spec.num_evidence() {
                return Err(err(format!("evidence index {k} out of range")));
            }
            if value != 1 && value != -1 {
                return Err(err(format!("evidence value {value}")));
            }
            zs.push((k, value as i8));
        }
        match rec.split {
            SplitTag::Train => {
                if let Some(y) = rec.y {
                    data.train.push(LabeledPair {
                        example_id: id,
                        x: rec.x.clone(),
                        label: Label::Task(y),
                    });
                }
                for (index, value) in zs {
                    data.train.push(LabeledPair {
                        example_id: id,
                        x: rec.x.clone(),
                        label: Label::Evidence { index, value },
                    });
                }
            }
            SplitTag::Validation | SplitTag::Test => {
                let y = rec.y.ok_or_else(|| err("evaluation line without `y`".into()))?;
                if zs.len() != spec.num_evidence() {
                    return Err(err(format!(
                        "evaluation line has {} of {} evidence labels",
                        zs.len(),
                        spec.num_evidence()
                    )));
                }
                let mut z = EvidenceVector::absent(spec.num_evidence());
                for (k, v) in zs {
                    z.set(k, v > 0);
                }
                let ex = Example { id, x: rec.x, y, z };
                if rec.split == SplitTag::Validation {
                    data.validation.push(ex);
                } else {
                    data.test.push(ex);
                }
            }
        }
    }
    Ok(data)
}

//! Classification losses, consistency regularizers and the regularized
//! training objective, all recorded on an autodiff [`Tape`].
//!
//! Hard regularizers anchor on the MAP task class, which is read off the
//! recorded values, so no gradient reaches the task head through them.
//! Soft regularizers weight every class by its posterior probability and
//! differentiate through those weights as well.
//!
//! The sufficiency penalty replaces `max_k p_k` with
//! `logsumexp_k(log p_k) = log Σ_k p_k`. This is smooth, but it is negative
//! whenever the direct probabilities sum past 1; no clamping is applied.

use std::borrow::Borrow;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::constraints::ConstraintSpec;
use crate::error::{Error, Result};
use crate::model::{ModelParams, TapePosterior};
use crate::synthdata::{Label, LabeledPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    #[default]
    Hard,
    Soft,
}

impl std::fmt::Display for RegMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegMode::Hard => "hard",
            RegMode::Soft => "soft",
        })
    }
}

impl std::str::FromStr for RegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(RegMode::Hard),
            "soft" => Ok(RegMode::Soft),
            other => Err(Error::InvalidConfig(format!("unknown regularizer mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub mode: RegMode,
    pub class_weights: Vec<f64>,
    /// Per evidence label, the weights for `z_k = -1` and `z_k = +1`.
    pub evidence_weights: Vec<[f64; 2]>,
}

impl LossConfig {
    pub fn unweighted(spec: &ConstraintSpec, omega1: f64, omega2: f64, mode: RegMode) -> Self {
        LossConfig {
            omega1,
            omega2,
            mode,
            class_weights: vec![1.0; spec.num_classes()],
            evidence_weights: vec![[1.0, 1.0]; spec.num_evidence()],
        }
    }

    /// Inverse-frequency weights (rescaled to mean 1) estimated from the
    /// training pairs.
    pub fn from_pairs(
        spec: &ConstraintSpec,
        pairs: &[LabeledPair],
        omega1: f64,
        omega2: f64,
        mode: RegMode,
    ) -> Self {
        let mut class_counts = vec![0usize; spec.num_classes()];
        let mut ev_counts = vec![[0usize; 2]; spec.num_evidence()];
        for pair in pairs {
            match pair.label {
                Label::Task(y) if y < class_counts.len() => class_counts[y] += 1,
                Label::Evidence { index, value } if index < ev_counts.len() => {
                    ev_counts[index][usize::from(value > 0)] += 1
                }
                _ => {}
            }
        }
        LossConfig {
            omega1,
            omega2,
            mode,
            class_weights: inverse_frequency(&class_counts),
            evidence_weights: ev_counts
                .iter()
                .map(|c| {
                    let w = inverse_frequency(c);
                    [w[0], w[1]]
                })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &ConstraintSpec) -> Result<()> {
        if !self.omega1.is_finite() || !self.omega2.is_finite() || self.omega1 < 0.0 || self.omega2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "regularization coefficients must be finite and nonnegative, got ({}, {})",
                self.omega1, self.omega2
            )));
        }
        if self.class_weights.len() != spec.num_classes() {
            return Err(Error::LengthMismatch {
                what: "class weights",
                expected: spec.num_classes(),
                got: self.class_weights.len(),
            });
        }
        if self.evidence_weights.len() != spec.num_evidence() {
            return Err(Error::LengthMismatch {
                what: "evidence weights",
                expected: spec.num_evidence(),
                got: self.evidence_weights.len(),
            });
        }
        let all = self.class_weights.iter().chain(self.evidence_weights.iter().flatten());
        if let Some(w) = all.into_iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be positive, got {w}")));
        }
        Ok(())
    }
}

/// `1 / count` (a zero count treated as 1), rescaled to mean 1.
pub fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    if counts.is_empty() {
        return Vec::new();
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// `-w_y log p(y | x)`.
pub fn weighted_ce_task(tape: &Tape, post: &TapePosterior, y: usize, config: &LossConfig) -> Var {
    tape.scale(post.task_log_probs[y], -config.class_weights[y])
}

/// `-w log p(z_k = value | x)` with the weight for this label and sign.
pub fn weighted_ce_evidence(
    tape: &Tape,
    post: &TapePosterior,
    k: usize,
    value: i8,
    config: &LossConfig,
) -> Var {
    let [w_neg, w_pos] = config.evidence_weights[k];
    if value > 0 {
        tape.scale(post.evidence_log_pos[k], -w_pos)
    } else {
        tape.scale(post.evidence_log_neg[k], -w_neg)
    }
}

/// `-Σ_{k ∈ I1(c)} log p(z_k = -1 | x)`, or `None` for an empty set.
fn incompatibility_penalty(tape: &Tape, spec: &ConstraintSpec, post: &TapePosterior, class: usize) -> Option<Var> {
    let set = spec.incompatible(class);
    if set.is_empty() {
        return None;
    }
    let terms: Vec<Var> = set.iter().map(|&k| post.evidence_log_neg[k]).collect();
    Some(tape.neg(tape.sum(&terms)))
}

/// `-logsumexp_{k ∈ I2(c)} log p(z_k = +1 | x)`, or `None` for an empty set.
fn insufficiency_penalty(
    tape: &Tape,
    spec: &ConstraintSpec,
    post: &TapePosterior,
    class: usize,
) -> Result<Option<Var>> {
    let set = spec.direct_support(class);
    if set.is_empty() {
        return Ok(None);
    }
    let terms: Vec<Var> = set.iter().map(|&k| post.evidence_log_pos[k]).collect();
    Ok(Some(tape.neg(tape.logsumexp(&terms)?)))
}

fn posterior_weighted(tape: &Tape, post: &TapePosterior, per_class: Vec<Option<Var>>) -> Var {
    let (weights, penalties): (Vec<Var>, Vec<Var>) = per_class
        .into_iter()
        .enumerate()
        .filter_map(|(c, pen)| pen.map(|p| (post.task_probs[c], p)))
        .unzip();
    if weights.is_empty() {
        return tape.constant(0.0);
    }
    tape.dot(&weights, &penalties).expect("equal lengths by construction")
}

pub fn reg_r1_hard(tape: &Tape, spec: &ConstraintSpec, post: &TapePosterior) -> Var {
    let y_hat = post.argmax_class(tape);
    incompatibility_penalty(tape, spec, post, y_hat).unwrap_or_else(|| tape.constant(0.0))
}

pub fn reg_r1_soft(tape: &Tape, spec: &ConstraintSpec, post: &TapePosterior) -> Var {
    let per_class = (0..spec.num_classes())
        .map(|c| incompatibility_penalty(tape, spec, post, c))
        .collect();
    posterior_weighted(tape, post, per_class)
}

pub fn reg_r2_hard(tape: &Tape, spec: &ConstraintSpec, post: &TapePosterior) -> Result<Var> {
    let y_hat = post.argmax_class(tape);
    Ok(insufficiency_penalty(tape, spec, post, y_hat)?.unwrap_or_else(|| tape.constant(0.0)))
}

pub fn reg_r2_soft(tape: &Tape, spec: &ConstraintSpec, post: &TapePosterior) -> Result<Var> {
    let per_class = (0..spec.num_classes())
        .map(|c| insufficiency_penalty(tape, spec, post, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(posterior_weighted(tape, post, per_class))
}

/// Both regularizers for one example under the given mode.
pub fn regularizers(
    tape: &Tape,
    spec: &ConstraintSpec,
    post: &TapePosterior,
    mode: RegMode,
) -> Result<(Var, Var)> {
    Ok(match mode {
        RegMode::Hard => (reg_r1_hard(tape, spec, post), reg_r2_hard(tape, spec, post)?),
        RegMode::Soft => (reg_r1_soft(tape, spec, post), reg_r2_soft(tape, spec, post)?),
    })
}

/// Batch-averaged components of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub classification: Var,
    pub r1: Var,
    pub r2: Var,
}

/// `mean(classification) + ω1 mean(R1) + ω2 mean(R2)` over a batch where
/// each pair carries one label. The regularizers use every pair's input
/// regardless of its label.
pub fn total_objective<P: Borrow<LabeledPair>>(
    tape: &Tape,
    spec: &ConstraintSpec,
    params: &ModelParams,
    vars: &[Var],
    batch: &[P],
    config: &LossConfig,
) -> Result<ObjectiveTerms> {
    if batch.is_empty() {
        return Err(Error::Empty("objective batch"));
    }
    let mut ce = Vec::with_capacity(batch.len());
    let mut r1 = Vec::with_capacity(batch.len());
    let mut r2 = Vec::with_capacity(batch.len());
    for pair in batch {
        let pair = pair.borrow();
        let post = params.forward_tape(tape, vars, &pair.x)?;
        ce.push(match pair.label {
            Label::Task(y) => {
                spec.check_class(y)?;
                weighted_ce_task(tape, &post, y, config)
            }
            Label::Evidence { index, value } => {
                if index >= spec.num_evidence() {
                    return Err(Error::IndexOutOfRange {
                        what: "evidence index",
                        index,
                        limit: spec.num_evidence(),
                    });
                }
                weighted_ce_evidence(tape, &post, index, value, config)
            }
        });
        let (a, b) = regularizers(tape, spec, &post, config.mode)?;
        r1.push(a);
        r2.push(b);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let classification = tape.scale(tape.sum(&ce), inv_n);
    let r1 = tape.scale(tape.sum(&r1), inv_n);
    let r2 = tape.scale(tape.sum(&r2), inv_n);
    let weighted = [
        classification,
        tape.scale(r1, config.omega1),
        tape.scale(r2, config.omega2),
    ];
    Ok(ObjectiveTerms {
        total: tape.sum(&weighted),
        classification,
        r1,
        r2,
    })
}

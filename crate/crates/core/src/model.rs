//! Shared-backbone multitask classifier.
//!
//! One hidden ReLU layer feeds a single output layer of width `C + K`: the
//! first `C` logits are softmaxed into the task posterior and each of the
//! remaining `K` goes through its own sigmoid to give `p(z_k = +1 | x)`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::constraints::{ConstraintSpec, EvidenceVector};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub num_evidence: usize,
    /// Flattened `[w1 (hidden x input_dim), b1, w2 (outputs x hidden), b2]`,
    /// matrices row-major.
    pub weights: Vec<f64>,
}

/// Posterior marginals for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub task: Vec<f64>,
    pub evidence: Vec<f64>,
}

/// Posterior marginals recorded on a tape.
///
/// Evidence log-probabilities are kept for both signs and computed as
/// `-logsumexp(0, -l)` / `-logsumexp(0, l)`, which stays finite for any
/// logit.
#[derive(Debug, Clone)]
pub struct TapePosterior {
    pub task_probs: Vec<Var>,
    pub task_log_probs: Vec<Var>,
    pub evidence_log_pos: Vec<Var>,
    pub evidence_log_neg: Vec<Var>,
}

fn check_dims(d: usize, h: usize) -> Result<()> {
    if d == 0 || h == 0 {
        return Err(Error::InvalidConfig(format!(
            "input dimension {d} and hidden width {h} must be positive"
        )));
    }
    Ok(())
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(seed: u64, input_dim: usize, hidden: usize, spec: &ConstraintSpec) -> Result<Self> {
        check_dims(input_dim, hidden)?;
        let (c, k) = (spec.num_classes(), spec.num_evidence());
        let outputs = c + k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(Self::param_count(input_dim, hidden, outputs));
        let mut fill = |n: usize, fan_in: usize, fan_out: usize, weights: &mut Vec<f64>| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            weights.extend((0..n).map(|_| dist.sample(&mut rng)));
        };
        fill(hidden * input_dim, input_dim, hidden, &mut weights);
        weights.extend(std::iter::repeat_n(0.0, hidden));
        fill(outputs * hidden, hidden, outputs, &mut weights);
        weights.extend(std::iter::repeat_n(0.0, outputs));
        Ok(ModelParams {
            input_dim,
            hidden,
            num_classes: c,
            num_evidence: k,
            weights,
        })
    }

    pub fn zeros(input_dim: usize, hidden: usize, spec: &ConstraintSpec) -> Result<Self> {
        check_dims(input_dim, hidden)?;
        let outputs = spec.num_classes() + spec.num_evidence();
        Ok(ModelParams {
            input_dim,
            hidden,
            num_classes: spec.num_classes(),
            num_evidence: spec.num_evidence(),
            weights: vec![0.0; Self::param_count(input_dim, hidden, outputs)],
        })
    }

    fn param_count(d: usize, h: usize, outputs: usize) -> usize {
        h * d + h + outputs * h + outputs
    }

    pub fn outputs(&self) -> usize {
        self.num_classes + self.num_evidence
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn b1_offset(&self) -> usize {
        self.hidden * self.input_dim
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.outputs() * self.hidden
    }

    /// Flat indices of the output-layer weights and bias for output `o`.
    pub fn output_row(&self, o: usize) -> Vec<usize> {
        let start = self.w2_offset() + o * self.hidden;
        (start..start + self.hidden).chain([self.b2_offset() + o]).collect()
    }

    /// Flat indices of every parameter that only feeds the task logits.
    pub fn task_head_indices(&self) -> Vec<usize> {
        (0..self.num_classes).flat_map(|o| self.output_row(o)).collect()
    }

    /// Flat indices of every parameter that only feeds the evidence logits.
    pub fn evidence_head_indices(&self) -> Vec<usize> {
        (self.num_classes..self.outputs()).flat_map(|o| self.output_row(o)).collect()
    }

    pub fn check_compatible(&self, spec: &ConstraintSpec) -> Result<()> {
        if self.num_classes != spec.num_classes() || self.num_evidence != spec.num_evidence() {
            return Err(Error::LengthMismatch {
                what: "model outputs",
                expected: spec.num_classes() + spec.num_evidence(),
                got: self.outputs(),
            });
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let (d, h) = (self.input_dim, self.hidden);
        let w = &self.weights;
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w[j * d..(j + 1) * d];
                let pre = w[self.b1_offset() + j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                pre.max(0.0)
            })
            .collect();
        Ok((0..self.outputs())
            .map(|o| {
                let start = self.w2_offset() + o * h;
                let row = &w[start..start + h];
                w[self.b2_offset() + o] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Posterior> {
        let logits = self.logits(x)?;
        Ok(posterior_from_logits(&logits, self.num_classes))
    }

    /// Registers every parameter as a leaf on `tape`, in flat order.
    pub fn on_tape(&self, tape: &Tape) -> Vec<Var> {
        self.weights.iter().map(|&w| tape.var(w)).collect()
    }

    /// Records the forward pass for `x` using parameter leaves `vars`
    /// previously returned by [`ModelParams::on_tape`].
    pub fn forward_tape(&self, tape: &Tape, vars: &[Var], x: &[f64]) -> Result<TapePosterior> {
        self.check_input(x)?;
        if vars.len() != self.weights.len() {
            return Err(Error::LengthMismatch {
                what: "parameter leaves",
                expected: self.weights.len(),
                got: vars.len(),
            });
        }
        let (d, h) = (self.input_dim, self.hidden);
        let mut hidden = Vec::with_capacity(h);
        for j in 0..h {
            let pre = tape.linear(&vars[j * d..(j + 1) * d], x)?;
            let pre = tape.add(pre, vars[self.b1_offset() + j]);
            hidden.push(tape.relu(pre));
        }
        let mut logits = Vec::with_capacity(self.outputs());
        for o in 0..self.outputs() {
            let start = self.w2_offset() + o * h;
            let z = tape.dot(&vars[start..start + h], &hidden)?;
            logits.push(tape.add(z, vars[self.b2_offset() + o]));
        }
        TapePosterior::from_logits(tape, &logits, self.num_classes)
    }
}

pub fn posterior_from_logits(logits: &[f64], num_classes: usize) -> Posterior {
    let task_logits = &logits[..num_classes];
    let max = task_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + task_logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let task = task_logits.iter().map(|l| (l - lse).exp()).collect();
    let evidence = logits[num_classes..]
        .iter()
        .map(|&l| {
            if l >= 0.0 {
                1.0 / (1.0 + (-l).exp())
            } else {
                let e = l.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Posterior { task, evidence }
}

impl TapePosterior {
    pub fn from_logits(tape: &Tape, logits: &[Var], num_classes: usize) -> Result<Self> {
        let (task_logits, ev_logits) = logits.split_at(num_classes);
        let lse = tape.logsumexp(task_logits)?;
        let task_log_probs: Vec<Var> = task_logits.iter().map(|&l| tape.sub(l, lse)).collect();
        let task_probs = task_log_probs.iter().map(|&lp| tape.exp(lp)).collect();
        let zero = tape.constant(0.0);
        let mut evidence_log_pos = Vec::with_capacity(ev_logits.len());
        let mut evidence_log_neg = Vec::with_capacity(ev_logits.len());
        for &l in ev_logits {
            let nl = tape.neg(l);
            evidence_log_pos.push(tape.neg(tape.logsumexp(&[zero, nl])?));
            evidence_log_neg.push(tape.neg(tape.logsumexp(&[zero, l])?));
        }
        Ok(TapePosterior {
            task_probs,
            task_log_probs,
            evidence_log_pos,
            evidence_log_neg,
        })
    }

    /// Builds a posterior directly from probabilities as tape leaves. Task
    /// probabilities may be exactly 0 (their log is recorded as `-inf`);
    /// evidence probabilities must be strictly interior.
    pub fn from_probabilities(tape: &Tape, task: &[f64], evidence: &[f64]) -> Result<Self> {
        if let Some(&p) = task.iter().chain(evidence).find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::ProbabilityOutOfRange(p));
        }
        let task_probs: Vec<Var> = task.iter().map(|&p| tape.var(p)).collect();
        let task_log_probs = task_probs
            .iter()
            .zip(task)
            .map(|(&v, &p)| {
                if p > 0.0 {
                    tape.log(v)
                } else {
                    Ok(tape.constant(f64::NEG_INFINITY))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut evidence_log_pos = Vec::with_capacity(evidence.len());
        let mut evidence_log_neg = Vec::with_capacity(evidence.len());
        for &p in evidence {
            let pv = tape.var(p);
            evidence_log_pos.push(tape.log(pv)?);
            let q = tape.offset(tape.neg(pv), 1.0);
            evidence_log_neg.push(tape.log(q)?);
        }
        Ok(TapePosterior {
            task_probs,
            task_log_probs,
            evidence_log_pos,
            evidence_log_neg,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.task_probs.len()
    }

    /// MAP task class from recorded values; no gradient path exists through
    /// the returned index.
    pub fn argmax_class(&self, tape: &Tape) -> usize {
        argmax(&tape.values(&self.task_probs))
    }

    pub fn values(&self, tape: &Tape) -> Posterior {
        Posterior {
            task: tape.values(&self.task_probs),
            evidence: self.evidence_log_pos.iter().map(|&v| tape.value(v).exp()).collect(),
        }
    }
}

/// Index of the largest value, ties going to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// MAP labels: argmax task class (lowest index on ties) and `+1` for evidence
/// strictly above 0.5.
pub fn predict_map(posterior: &Posterior) -> (usize, EvidenceVector) {
    let y = argmax(&posterior.task);
    let mut z = EvidenceVector::absent(posterior.evidence.len());
    for (k, &p) in posterior.evidence.iter().enumerate() {
        z.set(k, p > 0.5);
    }
    (y, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ConstraintSpec {
        ConstraintSpec::edema()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(7, 5, 8, &spec()).unwrap();
        let b = ModelParams::init(7, 5, 8, &spec()).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(8, 5, 8, &spec()).unwrap();
        assert_ne!(a.weights, c.weights);
        assert_eq!(a.len(), 8 * 5 + 8 + 11 * 8 + 11);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let p = ModelParams::init(0, 6, 10, &spec()).unwrap();
        let a1 = (6.0f64 / 16.0).sqrt();
        assert!(p.weights[..60].iter().all(|w| w.abs() <= a1));
        assert!(p.weights[60..70].iter().all(|&w| w == 0.0));
        let a2 = (6.0f64 / 21.0).sqrt();
        assert!(p.weights[70..70 + 110].iter().all(|w| w.abs() <= a2));
    }

    #[test]
    fn minimal_width_model() {
        let p = ModelParams::init(1, 3, 1, &spec()).unwrap();
        let post = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(post.task.len(), 4);
        assert!(ModelParams::init(1, 0, 1, &spec()).is_err());
        assert!(ModelParams::init(1, 3, 0, &spec()).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let p = ModelParams::zeros(3, 4, &spec()).unwrap();
        let post = p.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert!(post.task.iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert!(post.evidence.iter().all(|&q| q == 0.5));
    }

    #[test]
    fn forward_errors() {
        let p = ModelParams::init(1, 3, 4, &spec()).unwrap();
        assert!(matches!(p.forward(&[1.0]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(
            p.forward(&[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = ModelParams::init(3, 4, 6, &spec()).unwrap();
        let x = [0.3, -1.1, 2.0, 0.7];
        let plain = p.forward(&x).unwrap();
        let tape = Tape::new();
        let vars = p.on_tape(&tape);
        let taped = p.forward_tape(&tape, &vars, &x).unwrap().values(&tape);
        for (a, b) in plain.task.iter().chain(&plain.evidence).zip(taped.task.iter().chain(&taped.evidence)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn evidence_rows_do_not_touch_task_posterior() {
        let mut p = ModelParams::init(5, 4, 6, &spec()).unwrap();
        let x = [0.3, -1.1, 2.0, 0.7];
        let before = p.forward(&x).unwrap();
        for i in p.evidence_head_indices() {
            p.weights[i] += 0.7;
        }
        let after = p.forward(&x).unwrap();
        assert_eq!(before.task, after.task);
        assert_ne!(before.evidence, after.evidence);
    }

    #[test]
    fn map_rules() {
        let tie = Posterior {
            task: vec![0.25; 4],
            evidence: vec![0.5, 0.51, 0.49],
        };
        let (y, z) = predict_map(&tie);
        assert_eq!(y, 0);
        assert_eq!(z.values(), &[-1, 1, -1]);

        let post = Posterior {
            task: vec![0.1, 0.2, 0.6, 0.1],
            evidence: vec![],
        };
        assert_eq!(predict_map(&post).0, 2);
    }

    #[test]
    fn from_probabilities_allows_one_hot_task() {
        let tape = Tape::new();
        let tp = TapePosterior::from_probabilities(&tape, &[0.0, 1.0, 0.0, 0.0], &[0.3; 7]).unwrap();
        assert_eq!(tp.argmax_class(&tape), 1);
        assert!(TapePosterior::from_probabilities(&tape, &[1.0], &[1.0]).is_err());
        assert!(TapePosterior::from_probabilities(&tape, &[1.2], &[0.5]).is_err());
    }
}

//! Stochastic training of the regularized objective.
//!
//! Every step samples one label type (the task label or one evidence
//! label), draws a mini-batch of pairs carrying that label, and takes an
//! Adam step on the batch objective. The regularizers are applied to every
//! batch whatever label was sampled. The checkpoint with the best validation
//! task accuracy is kept (earliest on ties).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::constraints::{ConstraintSpec, EvidenceVector};
use crate::error::{Error, Result};
use crate::losses::{total_objective, LossConfig, RegMode};
use crate::metrics::{dataset_report, InconsistencyReport, PredictionRecord};
use crate::model::{predict_map, ModelParams, Posterior, DEFAULT_HIDDEN};
use crate::synthdata::{Example, Label, LabeledPair, TrainingData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub omega1: f64,
    pub omega2: f64,
    pub mode: RegMode,
    /// Inverse training-split frequency when absent.
    pub class_weights: Option<Vec<f64>>,
    /// Inverse training-split frequency per label and sign when absent.
    pub evidence_weights: Option<Vec<[f64; 2]>>,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            omega1: 0.0,
            omega2: 0.0,
            mode: RegMode::Hard,
            class_weights: None,
            evidence_weights: None,
        }
    }
}

impl LossSettings {
    pub fn resolve(&self, spec: &ConstraintSpec, pairs: &[LabeledPair]) -> Result<LossConfig> {
        let mut cfg = LossConfig::from_pairs(spec, pairs, self.omega1, self.omega2, self.mode);
        if let Some(w) = &self.class_weights {
            cfg.class_weights = w.clone();
        }
        if let Some(w) = &self.evidence_weights {
            cfg.evidence_weights = w.clone();
        }
        cfg.validate(spec)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: usize,
    /// Probabilities over `[task, evidence_0, ..., evidence_{K-1}]`; uniform
    /// when absent.
    pub label_sampling: Option<Vec<f64>>,
    /// Scales the classification term of a step sampled with probability
    /// `pi_s` by `t_s / pi_s`, where `t` weights the task loss 1 and each
    /// evidence loss `1/K`, so every step is an unbiased estimate of the
    /// multitask objective whatever the sampling distribution.
    pub importance_weighting: bool,
    pub loss: LossSettings,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 32,
            steps: 4000,
            hidden: DEFAULT_HIDDEN,
            label_sampling: None,
            importance_weighting: true,
            loss: LossSettings::default(),
            eval_interval: 100,
            seeds: vec![0, 1, 2],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn sampling(&self, spec: &ConstraintSpec) -> Vec<f64> {
        match &self.label_sampling {
            Some(p) => p.clone(),
            None => vec![1.0 / (spec.num_evidence() + 1) as f64; spec.num_evidence() + 1],
        }
    }

    pub fn validate(&self, spec: &ConstraintSpec) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden must be at least 1".into()));
        }
        let p = self.sampling(spec);
        if p.len() != spec.num_evidence() + 1 {
            return Err(Error::LengthMismatch {
                what: "label sampling distribution",
                expected: spec.num_evidence() + 1,
                got: p.len(),
            });
        }
        if p.iter().any(|&q| !(0.0..=1.0).contains(&q)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("label sampling {p:?} is not a distribution")));
        }
        Ok(())
    }

    /// Factor applied to the classification term of a step that sampled
    /// each label slot.
    pub fn classification_scales(&self, spec: &ConstraintSpec) -> Vec<f64> {
        let p = self.sampling(spec);
        if !self.importance_weighting {
            return vec![1.0; p.len()];
        }
        let k = spec.num_evidence() as f64;
        p.iter()
            .enumerate()
            .map(|(s, &pi)| {
                let target = if s == 0 { 1.0 } else { 1.0 / k };
                if pi > 0.0 { target / pi } else { 0.0 }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            what: "optimizer state",
            expected: params.len(),
            got: grads.len().min(state.m.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: state.step as usize,
            detail: format!("gradient {i} is {}", grads[i]),
        });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec_hash: String,
    #[serde(flatten)]
    pub params: ModelParams,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: usize,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Mean batch objective since the previous entry (0 at step 0).
    pub mean_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub trace: Vec<TraceEntry>,
}

fn label_slot(label: &Label) -> usize {
    match label {
        Label::Task(_) => 0,
        Label::Evidence { index, .. } => index + 1,
    }
}

fn slot_name(spec: &ConstraintSpec, slot: usize) -> String {
    if slot == 0 {
        "task".into()
    } else {
        format!("evidence `{}`", spec.evidence_names()[slot - 1])
    }
}

pub fn task_accuracy(params: &ModelParams, split: &[Example]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut correct = 0usize;
    for ex in split {
        let (y_hat, _) = predict_map(&params.forward(&ex.x)?);
        correct += usize::from(y_hat == ex.y);
    }
    Ok(correct as f64 / split.len() as f64)
}

pub fn train(data: &TrainingData, spec: &ConstraintSpec, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_with_trace(data, spec, config, seed, |_| Ok(()))
}

/// Like [`train`], calling `on_eval` with every trace entry as it is
/// recorded.
pub fn train_with_trace(
    data: &TrainingData,
    spec: &ConstraintSpec,
    config: &TrainConfig,
    seed: u64,
    mut on_eval: impl FnMut(&TraceEntry) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate(spec)?;
    if data.train.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let input_dim = data.train[0].x.len();
    let loss = config.loss.resolve(spec, &data.train)?;

    let sampling = config.sampling(spec);
    let scales = config.classification_scales(spec);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); spec.num_evidence() + 1];
    for (i, pair) in data.train.iter().enumerate() {
        let slot = label_slot(&pair.label);
        if slot >= pools.len() {
            return Err(Error::IndexOutOfRange {
                what: "evidence index",
                index: slot - 1,
                limit: spec.num_evidence(),
            });
        }
        pools[slot].push(i);
    }
    if let Some(slot) = (0..pools.len()).find(|&s| sampling[s] > 0.0 && pools[s].is_empty()) {
        return Err(Error::NoPairsForLabel(slot_name(spec, slot)));
    }
    let label_dist =
        WeightedIndex::new(&sampling).map_err(|e| Error::InvalidConfig(format!("label sampling: {e}")))?;

    let mut params = ModelParams::init(seed, input_dim, config.hidden, spec)?;
    let mut opt = OptimizerState::new(params.len(), config.beta1, config.beta2, config.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);

    let checkpoint = |params: &ModelParams, step: usize, acc: f64| Checkpoint {
        spec_hash: spec.content_hash(),
        params: params.clone(),
        config: config.clone(),
        seed,
        step,
        validation_accuracy: acc,
    };

    let acc0 = task_accuracy(&params, &data.validation)?;
    let first = TraceEntry {
        step: 0,
        mean_loss: 0.0,
        validation_accuracy: acc0,
    };
    on_eval(&first)?;
    let mut trace = vec![first];
    let mut best = checkpoint(&params, 0, acc0);

    let mut batch: Vec<&LabeledPair> = Vec::with_capacity(config.batch_size);
    let tape = Tape::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for step in 1..=config.steps {
        let slot = label_dist.sample(&mut rng);
        let pool = &pools[slot];
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(&data.train[pool[rng.random_range(0..pool.len())]]);
        }

        tape.clear();
        let vars = params.on_tape(&tape);
        let terms = total_objective(&tape, spec, &params, &vars, &batch, &loss)?;
        let objective = if scales[slot] == 1.0 {
            terms.total
        } else {
            tape.linear(
                &[terms.classification, terms.r1, terms.r2],
                &[scales[slot], loss.omega1, loss.omega2],
            )?
        };
        let value = tape.value(objective);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("objective is {value}"),
            });
        }
        let grads = tape.backward(objective)?.wrt(&vars);
        adam_step(&mut params.weights, &grads, &mut opt, config.learning_rate).map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step, detail },
            other => other,
        })?;
        loss_sum += value;
        loss_count += 1;

        if step % config.eval_interval == 0 || step == config.steps {
            let acc = task_accuracy(&params, &data.validation)?;
            let entry = TraceEntry {
                step,
                mean_loss: loss_sum / loss_count as f64,
                validation_accuracy: acc,
            };
            on_eval(&entry)?;
            trace.push(entry);
            loss_sum = 0.0;
            loss_count = 0;
            if acc > best.validation_accuracy {
                best = checkpoint(&params, step, acc);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        final_params: params,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub acc_y: f64,
    pub auc_y: f64,
    pub acc_z: Vec<f64>,
    pub report: InconsistencyReport,
}

/// Area under the ROC curve from the Mann-Whitney rank statistic (ties get
/// average ranks). `None` when either class is missing.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Metrics from posteriors and ground truth: task accuracy, macro
/// one-vs-rest task AUC (NaN if no class has both positives and negatives),
/// per-evidence accuracy and the inconsistency report on MAP labels.
pub fn evaluate_posteriors(
    spec: &ConstraintSpec,
    posteriors: &[Posterior],
    truth: &[(usize, EvidenceVector)],
) -> Result<EvalMetrics> {
    if posteriors.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if posteriors.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "ground truth",
            expected: posteriors.len(),
            got: truth.len(),
        });
    }
    let n = posteriors.len();
    let k_total = spec.num_evidence();
    let mut records = Vec::with_capacity(n);
    let mut correct_y = 0usize;
    let mut correct_z = vec![0usize; k_total];
    for (post, (y, z)) in posteriors.iter().zip(truth) {
        let (y_hat, z_hat) = predict_map(post);
        correct_y += usize::from(y_hat == *y);
        for (k, c) in correct_z.iter_mut().enumerate() {
            *c += usize::from(z_hat.get(k) == z.get(k));
        }
        records.push(PredictionRecord {
            y_hat,
            z_hat,
            y_true: Some(*y),
            posterior: None,
        });
    }
    let aucs: Vec<f64> = (0..spec.num_classes())
        .filter_map(|c| {
            let scores: Vec<f64> = posteriors.iter().map(|p| p.task[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|(y, _)| *y == c).collect();
            rank_auc(&scores, &positive)
        })
        .collect();
    let auc_y = if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(EvalMetrics {
        n,
        acc_y: correct_y as f64 / n as f64,
        auc_y,
        acc_z: correct_z.iter().map(|&c| c as f64 / n as f64).collect(),
        report: dataset_report(spec, &records)?,
    })
}

pub fn evaluate(params: &ModelParams, split: &[Example], spec: &ConstraintSpec) -> Result<EvalMetrics> {
    params.check_compatible(spec)?;
    let posteriors = split.iter().map(|ex| params.forward(&ex.x)).collect::<Result<Vec<_>>>()?;
    let truth: Vec<(usize, EvidenceVector)> = split.iter().map(|ex| (ex.y, ex.z.clone())).collect();
    evaluate_posteriors(spec, &posteriors, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut st = OptimizerState::new(3, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam_step(&mut p, &[0.0; 3], &mut st, 1e-2).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn adam_constant_gradient_steps_by_learning_rate() {
        // with bias correction, m_hat = g and v_hat = g^2 exactly for a constant g
        let lr = 1e-3;
        for g in [2.5, -0.01] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(1, 0.9, 0.999, 1e-8);
            let mut prev = 0.0;
            for _ in 0..500 {
                adam_step(&mut p, &[g], &mut st, lr).unwrap();
                let delta: f64 = p[0] - prev;
                prev = p[0];
                assert!((delta.abs() - lr).abs() < 1e-3 * lr);
                assert_eq!(delta.signum(), -g.signum());
            }
        }
    }

    #[test]
    fn adam_rejects_nonfinite() {
        let mut p = vec![0.0; 2];
        let mut st = OptimizerState::new(2, 0.9, 0.999, 1e-8);
        assert!(matches!(
            adam_step(&mut p, &[1.0, f64::NAN], &mut st, 1e-3),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn auc_ranks() {
        assert_eq!(rank_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(rank_auc(&[0.5; 4], &[true, false, true, false]), Some(0.5));
        assert_eq!(rank_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(rank_auc(&[0.2, 0.9], &[false, true]), Some(1.0));
    }

    #[test]
    fn config_validation() {
        let spec = ConstraintSpec::edema();
        let mut c = TrainConfig::default();
        c.validate(&spec).unwrap();
        c.learning_rate = 0.0;
        assert!(c.validate(&spec).is_err());
        c.learning_rate = 1e-3;
        c.label_sampling = Some(vec![0.5; 8]);
        assert!(c.validate(&spec).is_err());
        c.label_sampling = Some(vec![1.0]);
        assert!(c.validate(&spec).is_err());
        c.label_sampling = None;
        c.batch_size = 0;
        assert!(c.validate(&spec).is_err());
    }
}

use consistent_evidence::autodiff::Tape;
use consistent_evidence::losses::{total_objective, LossConfig, RegMode};
use consistent_evidence::model::{ModelParams, Posterior};
use consistent_evidence::synthdata::{prepare, GenConfig, Label, TrainingData};
use consistent_evidence::trainer::{evaluate, evaluate_posteriors, rank_auc, train, train_with_trace, TrainConfig};
use consistent_evidence::{ConstraintSpec, Error, EvidenceVector};

fn small_data(seed: u64) -> TrainingData {
    let gen = GenConfig {
        n_train: 400,
        n_validation: 100,
        n_test: 100,
        input_dim: 8,
        seed,
        ..GenConfig::default()
    };
    prepare(&ConstraintSpec::edema(), &gen).unwrap()
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        hidden: 12,
        eval_interval: 25,
        ..TrainConfig::default()
    }
}

fn z(present: &[usize]) -> EvidenceVector {
    EvidenceVector::from_present(7, present).unwrap()
}

fn post(task: [f64; 4], evidence: &[(usize, f64)], rest: f64) -> Posterior {
    let mut e = vec![rest; 7];
    for &(k, p) in evidence {
        e[k] = p;
    }
    Posterior {
        task: task.to_vec(),
        evidence: e,
    }
}

/// Pairwise AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn eight_example_fixture() {
    let spec = ConstraintSpec::edema();
    let posteriors = vec![
        post([0.7, 0.1, 0.1, 0.1], &[], 0.1),
        post([0.1, 0.6, 0.2, 0.1], &[(0, 0.9)], 0.1),
        post([0.2, 0.5, 0.2, 0.1], &[(3, 0.8)], 0.1),
        post([0.1, 0.1, 0.7, 0.1], &[(3, 0.9), (5, 0.7)], 0.1),
        post([0.1, 0.1, 0.1, 0.7], &[], 0.2),
        post([0.4, 0.3, 0.2, 0.1], &[(1, 0.6)], 0.1),
        post([0.1, 0.2, 0.3, 0.4], &[(5, 0.9)], 0.1),
        post([0.25, 0.25, 0.25, 0.25], &[], 0.5),
    ];
    let truth = vec![
        (0, z(&[])),
        (1, z(&[0])),
        (2, z(&[3])),
        (3, z(&[5])),
        (3, z(&[6])),
        (1, z(&[1])),
        (3, z(&[5])),
        (0, z(&[])),
    ];
    let m = evaluate_posteriors(&spec, &posteriors, &truth).unwrap();
    assert_eq!(m.n, 8);
    assert_eq!(m.acc_y, 5.0 / 8.0);
    assert_eq!(m.acc_z, vec![1.0, 1.0, 1.0, 7.0 / 8.0, 1.0, 1.0, 7.0 / 8.0]);
    assert_eq!(m.report.r1_total, 3.0 / 8.0);
    assert_eq!(m.report.r1_by_class, vec![1.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0, 0.0]);
    assert_eq!(m.report.r2_total, 2.0 / 8.0);
    assert_eq!(m.report.r2_by_class, vec![0.0, 1.0 / 8.0, 0.0, 1.0 / 8.0]);
    let per_class = [11.0 / 12.0, 11.0 / 12.0, 3.0 / 7.0, 12.0 / 15.0];
    for (c, want) in per_class.iter().enumerate() {
        let scores: Vec<f64> = posteriors.iter().map(|p| p.task[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|(y, _)| *y == c).collect();
        assert!((pairwise_auc(&scores, &positive) - want).abs() < 1e-12);
        assert!((rank_auc(&scores, &positive).unwrap() - want).abs() < 1e-12);
    }
    assert!((m.auc_y - per_class.iter().sum::<f64>() / 4.0).abs() < 1e-12);
}

#[test]
fn constant_predictor_has_chance_auc() {
    let spec = ConstraintSpec::edema();
    let posteriors = vec![post([1.0, 0.0, 0.0, 0.0], &[], 0.1); 8];
    let truth: Vec<(usize, EvidenceVector)> = (0..8).map(|i| (i % 4, z(&[]))).collect();
    let m = evaluate_posteriors(&spec, &posteriors, &truth).unwrap();
    assert_eq!(m.auc_y, 0.5);
    assert_eq!(m.acc_y, 0.25);
    assert_eq!(m.report.r1_total, 0.0);
    assert_eq!(m.report.r2_total, 0.0);
}

#[test]
fn auc_undefined_without_both_labels() {
    let spec = ConstraintSpec::edema();
    assert_eq!(rank_auc(&[0.1, 0.2], &[true, true]), None);
    let m = evaluate_posteriors(&spec, &[post([0.7, 0.1, 0.1, 0.1], &[], 0.1)], &[(0, z(&[]))]).unwrap();
    assert!(m.auc_y.is_nan());
    assert!(evaluate_posteriors(&spec, &[], &[]).is_err());
}

#[test]
fn training_is_deterministic() {
    let spec = ConstraintSpec::edema();
    let data = small_data(1);
    let cfg = small_config(150);
    let a = train(&data, &spec, &cfg, 5).unwrap();
    let b = train(&data, &spec, &cfg, 5).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(a.trace, b.trace);
    let c = train(&data, &spec, &cfg, 6).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn zero_steps_returns_initial_checkpoint() {
    let spec = ConstraintSpec::edema();
    let data = small_data(2);
    let cfg = small_config(0);
    let out = train(&data, &spec, &cfg, 3).unwrap();
    assert_eq!(out.best.step, 0);
    assert_eq!(out.best.params, ModelParams::init(3, 8, 12, &spec).unwrap());
    assert_eq!(out.final_params, out.best.params);
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.best.spec_hash, spec.content_hash());
}

#[test]
fn selected_checkpoint_is_most_accurate() {
    let spec = ConstraintSpec::edema();
    let data = small_data(3);
    let mut seen = Vec::new();
    let out = train_with_trace(&data, &spec, &small_config(300), 0, |e| {
        seen.push(e.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, out.trace);
    assert_eq!(out.trace.len(), 1 + 300 / 25);
    let best = out.trace.iter().map(|e| e.validation_accuracy).fold(0.0, f64::max);
    assert_eq!(out.best.validation_accuracy, best);
    let first = out.trace.iter().find(|e| e.validation_accuracy == best).unwrap();
    assert_eq!(out.best.step, first.step);
    let acc = evaluate(&out.best.params, &data.validation, &spec).unwrap().acc_y;
    assert_eq!(acc, best);
}

#[test]
fn evidence_heads_move_only_through_regularizers() {
    let spec = ConstraintSpec::edema();
    let data = small_data(4);
    let mut cfg = small_config(100);
    let mut task_only = vec![0.0; 8];
    task_only[0] = 1.0;
    cfg.label_sampling = Some(task_only);
    let init = ModelParams::init(0, 8, 12, &spec).unwrap();
    let idx = init.evidence_head_indices();

    let out = train(&data, &spec, &cfg, 0).unwrap();
    assert!(idx.iter().all(|&i| out.final_params.weights[i] == init.weights[i]));
    assert!(out.final_params.task_head_indices().iter().any(|&i| out.final_params.weights[i] != init.weights[i]));

    cfg.loss.omega1 = 1.0;
    cfg.loss.omega2 = 1.0;
    let out = train(&data, &spec, &cfg, 0).unwrap();
    assert!(idx.iter().any(|&i| out.final_params.weights[i] != init.weights[i]));
}

#[test]
fn task_batches_leave_evidence_gradients_at_zero() {
    let spec = ConstraintSpec::edema();
    let data = small_data(5);
    let params = ModelParams::init(1, 8, 12, &spec).unwrap();
    let batch: Vec<_> = data.train.iter().filter(|p| matches!(p.label, Label::Task(_))).take(32).collect();
    for mode in [RegMode::Hard, RegMode::Soft] {
        let cfg = LossConfig::from_pairs(&spec, &data.train, 0.0, 0.0, mode);
        let t = Tape::new();
        let vars = params.on_tape(&t);
        let terms = total_objective(&t, &spec, &params, &vars, &batch, &cfg).unwrap();
        let g = t.backward(terms.total).unwrap().wrt(&vars);
        assert!(params.evidence_head_indices().iter().all(|&i| g[i] == 0.0));
    }
}

#[test]
fn missing_label_pool_is_reported() {
    let spec = ConstraintSpec::edema();
    let gen = GenConfig {
        n_train: 50,
        n_validation: 10,
        n_test: 10,
        p_evidence_label: 0.0,
        ..GenConfig::default()
    };
    let data = prepare(&spec, &gen).unwrap();
    match train(&data, &spec, &small_config(5), 0) {
        Err(Error::NoPairsForLabel(name)) => assert!(name.contains("vascular congestion")),
        other => panic!("unexpected {:?}", other.map(|o| o.best.step)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let spec = ConstraintSpec::edema();
    let data = small_data(6);
    for cfg in [
        TrainConfig { learning_rate: 0.0, ..small_config(1) },
        TrainConfig { batch_size: 0, ..small_config(1) },
        TrainConfig { label_sampling: Some(vec![0.5, 0.5]), ..small_config(1) },
    ] {
        assert!(train(&data, &spec, &cfg, 0).is_err());
    }
}

#[test]
fn noiseless_data_is_learned() {
    let spec = ConstraintSpec::edema();
    let gen = GenConfig {
        noise_sigma: 0.0,
        n_train: 2000,
        ..GenConfig::default()
    };
    let data = prepare(&spec, &gen).unwrap();
    let cfg = TrainConfig {
        steps: 2000,
        ..TrainConfig::default()
    };
    let out = train(&data, &spec, &cfg, 0).unwrap();
    assert!(out.best.step <= 2000);
    assert!(out.best.validation_accuracy >= 0.99, "accuracy {}", out.best.validation_accuracy);
}

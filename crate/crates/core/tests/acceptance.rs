//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::time::{Duration, Instant};

use consistent_evidence::autodiff::{grad_check, Tape, Var};
use consistent_evidence::harness::{run_sweep, SweepGrid, SweepResult, TABLE_GRID};
use consistent_evidence::losses::{reg_r1_hard, reg_r1_soft, reg_r2_hard, reg_r2_soft, total_objective, LossConfig, RegMode};
use consistent_evidence::metrics::{dataset_report, exact_inconsistency_probability, min_bound, union_bound, PredictionRecord};
use consistent_evidence::model::{ModelParams, TapePosterior};
use consistent_evidence::synthdata::{generate, prepare, GenConfig};
use consistent_evidence::trainer::TrainConfig;
use consistent_evidence::{check_consistent, ConstraintSpec, EvidenceVector, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Slack for comparing a bound against an exact probability computed by a
/// different summation order.
const BOUND_SLACK: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_POINTS: usize = 50;
const R1_RATIO_MAX: f64 = 0.4;
const SOFT_R1_REDUCTION_MIN: f64 = 0.4;
const ACC_DROP_MAX: f64 = 0.05;
const REDUCTION_TOL: f64 = 1e-12;
const CONSISTENCY_TUPLES: usize = 100_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn vector(bits: &[bool]) -> EvidenceVector {
    let present: Vec<usize> = bits.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect();
    EvidenceVector::from_present(bits.len(), &present).unwrap()
}

fn fixture() -> Vec<(usize, Vec<bool>)> {
    let b = |s: &str| s.chars().map(|c| c == '1').collect::<Vec<bool>>();
    vec![
        (0, b("0000000")),
        (0, b("1000001")),
        (0, b("1111111")),
        (1, b("1000000")),
        (1, b("0001100")),
        (1, b("0000000")),
        (2, b("0001000")),
        (2, b("1110010")),
        (2, b("0000000")),
        (3, b("0000001")),
        (3, b("1111100")),
        (3, b("0000010")),
    ]
}

fn c1_oracle(spec: &ConstraintSpec) -> Outcome {
    let records = fixture();
    let recs: Vec<PredictionRecord> = records.iter().map(|(y, b)| PredictionRecord::new(*y, vector(b))).collect();
    let report = dataset_report(spec, &recs).unwrap();
    let mut r1 = [0u64; 4];
    let mut r2 = [0u64; 4];
    for (y, bits) in &records {
        r1[*y] += spec.incompatible(*y).iter().filter(|&&k| bits[k]).count() as u64;
        let direct = spec.direct_support(*y);
        r2[*y] += u64::from(!direct.is_empty() && direct.iter().all(|&k| !bits[k]));
    }
    let n = records.len() as f64;
    let mut pass = (0..4).all(|c| report.r1_by_class[c] == r1[c] as f64 / n && report.r2_by_class[c] == r2[c] as f64 / n);
    pass &= report.r1_total == r1.iter().sum::<u64>() as f64 / n;
    pass &= report.r2_total == r2.iter().sum::<u64>() as f64 / n;
    check(pass, format!("r1 counts {r1:?}, r2 counts {r2:?} over {} records", records.len()))
}

fn c2_bounds(spec: &ConstraintSpec) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut worst_gap = f64::INFINITY;
    for _ in 0..1000 {
        let probs: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        for y in 0..4 {
            let (mut inc, mut ins) = (0.0, 0.0);
            for mask in 0u32..128 {
                let bits: Vec<bool> = (0..7).map(|i| mask >> i & 1 == 1).collect();
                let w: f64 = bits.iter().zip(&probs).map(|(&b, &p)| if b { p } else { 1.0 - p }).product();
                if spec.incompatible(y).iter().any(|&k| bits[k]) {
                    inc += w;
                }
                if spec.direct_support(y).iter().all(|&k| !bits[k]) && !spec.direct_support(y).is_empty() {
                    ins += w;
                }
            }
            let (lib_inc, lib_ins) = exact_inconsistency_probability(spec, y, &probs).unwrap();
            let u = union_bound(spec, y, &probs).unwrap();
            let m = min_bound(spec, y, &probs).unwrap();
            for (bound, exact) in [(u, inc), (m, ins), (u, lib_inc), (m, lib_ins)] {
                if bound < exact - BOUND_SLACK {
                    violations += 1;
                }
                worst_gap = worst_gap.min(bound - exact);
            }
        }
    }
    check(violations == 0, format!("{violations} violations over 4000 cases, smallest gap {worst_gap:.2e}"))
}

fn c3_gradients(spec: &ConstraintSpec) -> Outcome {
    let gen = GenConfig {
        n_train: 200,
        n_validation: 1,
        n_test: 1,
        input_dim: 4,
        seed: 3,
        ..GenConfig::default()
    };
    let data = prepare(spec, &gen).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 2];
    for (m, mode) in [RegMode::Hard, RegMode::Soft].into_iter().enumerate() {
        let cfg = LossConfig::from_pairs(spec, &data.train, 1.0, 1.0, mode);
        for _ in 0..GRAD_POINTS {
            // fully random weights keep the task logits untied
            let mut params = ModelParams::zeros(4, 6, spec).unwrap();
            for w in params.weights.iter_mut() {
                *w = rng.random_range(-1.0..1.0);
            }
            let batch: Vec<_> = (0..8).map(|_| &data.train[rng.random_range(0..data.train.len())]).collect();
            let f = |t: &Tape, v: &[Var]| -> Result<Var> { Ok(total_objective(t, spec, &params, v, &batch, &cfg)?.total) };
            worst[m] = worst[m].max(grad_check(f, &params.weights, GRAD_STEP).unwrap());
        }
    }
    check(
        worst.iter().all(|&w| w < GRAD_TOL),
        format!("max relative error hard {:.2e}, soft {:.2e}", worst[0], worst[1]),
    )
}

fn sweep(spec: &ConstraintSpec, points: Vec<(f64, f64)>, mode: RegMode) -> SweepResult {
    let grid = SweepGrid {
        spec: spec.clone(),
        points,
        mode,
        seeds: vec![0, 1, 2],
        gen: GenConfig::default(),
        train: TrainConfig::default(),
        parallelism: None,
    };
    run_sweep(&grid, None).unwrap()
}

fn pooled(a: f64, b: f64) -> f64 {
    ((a * a + b * b) / 2.0).sqrt()
}

fn c4_effect(hard: &SweepResult) -> Outcome {
    let base = hard.aggregate_at(0.0, 0.0).unwrap();
    let reg = hard.aggregate_at(10.0, 10.0).unwrap();
    let ratio = reg.r1.mean / base.r1.mean;
    check(
        ratio <= R1_RATIO_MAX && reg.r2.mean <= base.r2.mean && hard.failures.is_empty(),
        format!(
            "R1 {:.4} -> {:.4} (ratio {ratio:.3}), R2 {:.4} -> {:.4}",
            base.r1.mean, reg.r1.mean, base.r2.mean, reg.r2.mean
        ),
    )
}

fn c5_cross(hard: &SweepResult) -> Outcome {
    let base = hard.aggregate_at(0.0, 0.0).unwrap();
    let only1 = hard.aggregate_at(10.0, 0.0).unwrap();
    let only2 = hard.aggregate_at(0.0, 10.0).unwrap();
    let tol2 = pooled(base.r2.std, only1.r2.std);
    let tol1 = pooled(base.r1.std, only2.r1.std);
    check(
        only1.r2.mean >= base.r2.mean - tol2 && only2.r1.mean >= base.r1.mean - tol1,
        format!(
            "R2 at (10,0) {:.4} vs {:.4} (tol {tol2:.4}); R1 at (0,10) {:.4} vs {:.4} (tol {tol1:.4})",
            only1.r2.mean, base.r2.mean, only2.r1.mean, base.r1.mean
        ),
    )
}

fn c6_accuracy(hard: &SweepResult) -> Outcome {
    let base = hard.aggregate_at(0.0, 0.0).unwrap();
    let reg = hard.aggregate_at(10.0, 10.0).unwrap();
    let gap = (reg.acc_y.mean - base.acc_y.mean).abs();
    check(
        gap <= ACC_DROP_MAX,
        format!("accuracy {:.4} -> {:.4} (gap {gap:.4})", base.acc_y.mean, reg.acc_y.mean),
    )
}

fn c7_degenerate(spec: &ConstraintSpec, sweeps: &[&SweepResult]) -> Outcome {
    let last = spec.num_classes() - 1;
    let mut checked = 0;
    let mut pass = true;
    for s in sweeps {
        for r in &s.rows {
            pass &= r.r1_by_class[last] == 0.0;
            checked += 1;
        }
    }
    let recs: Vec<PredictionRecord> = fixture().iter().map(|(y, b)| PredictionRecord::new(*y, vector(b))).collect();
    pass &= dataset_report(spec, &recs).unwrap().r1_by_class[last] == 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let recs: Vec<PredictionRecord> = (0..20)
            .map(|_| {
                let bits: Vec<bool> = (0..7).map(|_| rng.random()).collect();
                PredictionRecord::new(rng.random_range(0..4), vector(&bits))
            })
            .collect();
        pass &= dataset_report(spec, &recs).unwrap().r1_by_class[last] == 0.0;
        checked += 1;
    }
    check(pass, format!("{checked} trained models and random fixtures plus the handcrafted fixture"))
}

fn c8_consistency(spec: &ConstraintSpec) -> Outcome {
    let gen = GenConfig {
        n_train: CONSISTENCY_TUPLES,
        n_validation: 0,
        n_test: 0,
        input_dim: 1,
        ..GenConfig::default()
    };
    let data = generate(spec, &gen).unwrap();
    let bad = data.train.iter().filter(|e| !check_consistent(spec, e.y, &e.z).unwrap().is_consistent()).count();
    check(bad == 0 && data.train.len() == CONSISTENCY_TUPLES, format!("{bad} violations in {} tuples", data.train.len()))
}

fn c9_soft(soft: &SweepResult) -> Outcome {
    let base = soft.aggregate_at(0.0, 0.0).unwrap();
    let reg = soft.aggregate_at(10.0, 10.0).unwrap();
    let ratio = reg.r1.mean / base.r1.mean;
    let complete = soft.failures.is_empty() && TABLE_GRID.iter().all(|&(a, b)| soft.aggregate_at(a, b).is_some());
    check(
        complete && ratio <= 1.0 - SOFT_R1_REDUCTION_MIN,
        format!(
            "R1 {:.4}±{:.4} -> {:.4}±{:.4} (ratio {ratio:.3}), accuracy {:.4} -> {:.4}",
            base.r1.mean, base.r1.std, reg.r1.mean, reg.r1.std, base.acc_y.mean, reg.acc_y.mean
        ),
    )
}

fn c10_reduction(spec: &ConstraintSpec) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let class = rng.random_range(0..4);
        let mut task = vec![0.0; 4];
        task[class] = 1.0;
        let evidence: Vec<f64> = (0..7).map(|_| rng.random_range(0.001..0.999)).collect();
        let t = Tape::new();
        let post = TapePosterior::from_probabilities(&t, &task, &evidence).unwrap();
        let d1 = t.value(reg_r1_soft(&t, spec, &post)) - t.value(reg_r1_hard(&t, spec, &post));
        let d2 = t.value(reg_r2_soft(&t, spec, &post).unwrap()) - t.value(reg_r2_hard(&t, spec, &post).unwrap());
        worst = worst.max(d1.abs()).max(d2.abs());
    }
    check(worst <= REDUCTION_TOL, format!("max difference {worst:.2e} over 100 settings"))
}

fn report(id: &str, name: &str, limit: Option<Duration>, run: impl FnOnce() -> Outcome, failed: &mut usize) {
    let start = Instant::now();
    let mut out = run();
    let took = start.elapsed();
    if let Some(l) = limit {
        if took > l {
            out.pass = false;
            out.detail.push_str(&format!("; over the {:.0} s limit", l.as_secs_f64()));
        }
    }
    if !out.pass {
        *failed += 1;
    }
    let tag = if out.pass { "PASS" } else { "FAIL" };
    println!("{tag} {id} {name}: {} [{:.2} s]", out.detail, took.as_secs_f64());
}

fn main() {
    let spec = ConstraintSpec::edema();
    let mut failed = 0;
    report("C1", "oracle equivalence", Some(Duration::from_secs(1)), || c1_oracle(&spec), &mut failed);
    report("C2", "union and min bounds", Some(Duration::from_secs(5)), || c2_bounds(&spec), &mut failed);
    report("C3", "objective gradients", Some(Duration::from_secs(30)), || c3_gradients(&spec), &mut failed);

    let start = Instant::now();
    let hard = sweep(&spec, vec![(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)], RegMode::Hard);
    let hard_time = start.elapsed();
    println!("     hard sweep: {} runs in {:.1} s", hard.rows.len(), hard_time.as_secs_f64());
    report(
        "C4",
        "regularization effect",
        None,
        || {
            let mut o = c4_effect(&hard);
            if hard_time > Duration::from_secs(600) {
                o.pass = false;
                o.detail.push_str("; sweep over the 600 s limit");
            }
            o
        },
        &mut failed,
    );
    report("C5", "cross effect", None, || c5_cross(&hard), &mut failed);
    report("C6", "accuracy preserved", None, || c6_accuracy(&hard), &mut failed);

    let mut points = TABLE_GRID.to_vec();
    points.push((10.0, 10.0));
    let start = Instant::now();
    let soft = sweep(&spec, points, RegMode::Soft);
    println!("     soft sweep: {} runs in {:.1} s", soft.rows.len(), start.elapsed().as_secs_f64());

    report("C7", "last class never incompatible", None, || c7_degenerate(&spec, &[&hard, &soft]), &mut failed);
    report("C8", "generated tuples consistent", None, || c8_consistency(&spec), &mut failed);
    report("C9", "soft regularizers reduce R1", None, || c9_soft(&soft), &mut failed);
    report("C10", "soft equals hard on one-hot", None, || c10_reduction(&spec), &mut failed);

    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

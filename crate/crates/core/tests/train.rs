mod common;

use common::{estimator_and_exact, grad_rel_error, tiny_config, tiny_policy};
use egam::model::load_checkpoint;
use egam::problems::generate_instance;
use egam::train::{
    advantages, compute_baseline, reinforce_grad, run_training, sample_rollouts, BatchLog, SampleSpec, TrainOutputs,
    Trainer, ValidationLog,
};
use egam::{Error, Instance, Profile, ProblemKind};
use egam_tensor::Real;
use proptest::prelude::*;

fn spec(m: usize, n: usize) -> SampleSpec {
    SampleSpec {
        augmentations: m,
        samples: n,
        beta: egam::problems::DEFAULT_BETA,
    }
}

fn instances(kind: ProblemKind, n: usize, count: u64) -> Vec<Instance> {
    (0..count).map(|s| generate_instance(kind, n, 500 + s).unwrap()).collect()
}

fn tiny_profile(kind: ProblemKind) -> Profile {
    let mut p = Profile::toy();
    p.model = tiny_config();
    p.train.kind = kind;
    p.train.nodes = 6;
    p.train.batch_size = 8;
    p.train.batches_per_epoch = 3;
    p.train.epochs = 2;
    p.train.augmentations = 2;
    p.train.samples = 2;
    p.train.val_size = 10;
    p.train.chunk = 3;
    p
}

proptest! {
    #[test]
    fn advantages_sum_to_zero_per_instance(costs in prop::collection::vec(0.0f64..50.0, 1..8), groups in 1usize..6) {
        let all: Vec<Real> = (0..groups).flat_map(|g| costs.iter().map(move |c| (c + g as f64) as Real)).collect();
        let adv = advantages(&all, costs.len());
        for (a, c) in adv.chunks(costs.len()).zip(all.chunks(costs.len())) {
            prop_assert!(a.iter().sum::<Real>().abs() < 1e-9);
            let mean = c.iter().sum::<Real>() / c.len() as Real;
            prop_assert!((compute_baseline(c) - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn baseline_is_the_group_mean() {
    assert_eq!(compute_baseline(&[1.0, 2.0, 6.0]), 3.0);
    assert_eq!(advantages(&[1.0, 2.0, 6.0, 4.0, 4.0, 4.0], 3), vec![-2.0, -1.0, 3.0, 0.0, 0.0, 0.0]);
}

#[test]
fn zero_advantages_give_zero_gradient() {
    let pol = tiny_policy(ProblemKind::Cvrp, 1);
    let insts = instances(ProblemKind::Cvrp, 6, 3);
    let mut roll = sample_rollouts(&pol, &insts, spec(2, 3), 4, 0).unwrap();
    let g = roll.gradient(&vec![0.0; 18], 1.0).unwrap();
    assert!(g.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn integer_cost_shift_leaves_gradient_bit_identical() {
    let pol = tiny_policy(ProblemKind::Vrptw, 2);
    let insts = instances(ProblemKind::Vrptw, 7, 2);
    let mut roll = sample_rollouts(&pol, &insts, spec(4, 4), 9, 0).unwrap();
    let costs = roll.costs();
    let shifted: Vec<Real> = costs.iter().map(|c| c + 3.0).collect();
    let a = roll.gradient(&advantages(&costs, 16), 0.25).unwrap();
    let b = roll.gradient(&advantages(&shifted, 16), 0.25).unwrap();
    for ((ia, ta), (ib, tb)) in a.iter().zip(b.iter()) {
        assert_eq!(ia, ib);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn bad_advantages_are_rejected() {
    let pol = tiny_policy(ProblemKind::Tsp, 3);
    let insts = instances(ProblemKind::Tsp, 5, 1);
    let mut roll = sample_rollouts(&pol, &insts, spec(1, 2), 0, 0).unwrap();
    assert!(matches!(roll.gradient(&[1.0], 1.0), Err(Error::Config(_))));
    assert!(matches!(roll.gradient(&[Real::NAN, 0.0], 1.0), Err(Error::Tensor(_))));
}

#[test]
fn probability_weighted_estimator_is_exact() {
    for (kind, seed) in [(ProblemKind::Tsp, 1), (ProblemKind::Tsp, 2), (ProblemKind::Tsptw, 3)] {
        let pol = tiny_policy(kind, seed);
        let inst = generate_instance(kind, 4, seed + 10).unwrap();
        let (est, exact) = estimator_and_exact(&pol, &inst);
        let err = grad_rel_error(&est, &exact, 1e-8);
        assert!(err < 1e-6, "{kind}: {err}");
    }
}

#[test]
fn chunking_only_reorders_sums() {
    let pol = tiny_policy(ProblemKind::Tspdl, 4);
    let insts = instances(ProblemKind::Tspdl, 6, 5);
    let whole = reinforce_grad(&pol, &insts, spec(2, 2), 8, 5).unwrap();
    let split = reinforce_grad(&pol, &insts, spec(2, 2), 8, 2).unwrap();
    assert_eq!(whole.costs, split.costs);
    assert_eq!(whole.baselines, split.baselines);
    let floor = whole.gradients.sq_norm().sqrt() * 1e-9;
    let err = grad_rel_error(&whole.gradients, &split.gradients, floor);
    assert!(err < 1e-7, "{err}");
}

#[test]
fn single_trajectory_baseline_is_rejected() {
    let mut p = tiny_profile(ProblemKind::Tsp);
    p.train.augmentations = 1;
    p.train.samples = 1;
    let pol = tiny_policy(ProblemKind::Tsp, 0);
    assert!(matches!(Trainer::new(pol, p.train), Err(Error::Config(_))));
}

#[test]
fn policy_kind_must_match() {
    let p = tiny_profile(ProblemKind::Tsp);
    let pol = tiny_policy(ProblemKind::Cvrp, 0);
    assert!(Trainer::new(pol, p.train).is_err());
}

#[test]
fn learning_rate_drops_for_the_final_epochs() {
    let mut cfg = Profile::toy().train;
    cfg.epochs = 20;
    cfg.decay_fraction = 0.1;
    assert_eq!(cfg.lr_at(18), cfg.lr);
    assert_eq!(cfg.lr_at(19), cfg.lr / 10.0);
    assert_eq!(cfg.lr_at(20), cfg.lr / 10.0);
}

fn without_clock(mut row: BatchLog) -> BatchLog {
    row.wallclock_s = 0.0;
    row
}

#[test]
fn training_batches_are_reproducible() {
    let p = tiny_profile(ProblemKind::Pctsp);
    let mut a = Trainer::new(tiny_policy(ProblemKind::Pctsp, 5), p.train.clone()).unwrap();
    let mut b = Trainer::new(tiny_policy(ProblemKind::Pctsp, 5), p.train.clone()).unwrap();
    for batch in 0..2 {
        let ra = a.train_batch(1, batch).unwrap().unwrap();
        let rb = b.train_batch(1, batch).unwrap().unwrap();
        assert_eq!(without_clock(ra), without_clock(rb));
    }
    for ((_, pa), (_, pb)) in a.policy().store().iter().zip(b.policy().store().iter()) {
        assert_eq!(pa.value.data(), pb.value.data());
    }
    assert_ne!(a.batch_instances(1, 0).unwrap(), a.batch_instances(1, 1).unwrap());
    assert_ne!(a.batch_instances(1, 0).unwrap(), a.batch_instances(2, 0).unwrap());
}

#[test]
fn training_run_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = tiny_profile(ProblemKind::Tsp);
    p.train.checkpoint_every = 1;
    let outputs = TrainOutputs {
        checkpoint_dir: dir.path().join("ckpt"),
        log: dir.path().join("train.csv"),
        validation_log: dir.path().join("val.csv"),
    };
    let mut seen = 0;
    let report = run_training(&p, &outputs, &mut |_, _| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(report.validation.len(), 3);
    let rows: Vec<BatchLog> = csv::Reader::from_path(&outputs.log)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(rows.len(), 6 - report.skipped_batches);
    let val: Vec<ValidationLog> = csv::Reader::from_path(&outputs.validation_log)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect();
    assert_eq!(val, report.validation);
    for name in ["epoch-001.ckpt", "epoch-002.ckpt", "final.ckpt"] {
        assert!(outputs.checkpoint_dir.join(name).exists(), "{name}");
    }
    let loaded = load_checkpoint(outputs.final_checkpoint()).unwrap();
    for ((_, a), (_, b)) in loaded.store().iter().zip(report.policy.store().iter()) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

#[test]
fn short_training_improves_validation() {
    let mut p = tiny_profile(ProblemKind::Tsp);
    p.model.d_model = 16;
    p.model.head_dim = 8;
    p.model.d_ff = 32;
    p.train.batch_size = 32;
    p.train.batches_per_epoch = 15;
    p.train.epochs = 3;
    p.train.augmentations = 2;
    p.train.samples = 4;
    p.train.val_size = 100;
    p.train.chunk = 8;
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        checkpoint_dir: dir.path().join("ckpt"),
        log: dir.path().join("train.csv"),
        validation_log: dir.path().join("val.csv"),
    };
    let report = run_training(&p, &outputs, &mut |_, _| {}).unwrap();
    let first = report.validation.first().unwrap().greedy_cost;
    let last = report.validation.last().unwrap().greedy_cost;
    assert!(last < first, "validation {first} -> {last}");
}

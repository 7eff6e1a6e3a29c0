use duadeep::model::{Model, ModelConfig};
use duadeep::synthetic::{synthetic_records, synthetic_store};
use duadeep::train::{build_examples, train, train_step, Example, Optimizer, OptimizerKind, StopReason, TrainConfig};
use duadeep::tensor::{Precision, Scalar};

fn examples<T: Scalar>(n: usize, d_e: usize, seed: u64) -> Vec<Example<T>> {
    let recs = synthetic_records(n, 4..=10, seed).unwrap();
    let store = synthetic_store(&recs, d_e, seed + 1).unwrap();
    build_examples(&recs, &store).unwrap()
}

fn small(seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..ModelConfig::tiny(8)
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let tr = examples::<f32>(12, 8, 1);
    let va = examples::<f32>(4, 8, 2);
    let c = TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        seed: 5,
        log_wall_clock: false,
        ..TrainConfig::default()
    };
    let run = || train(Model::<f32>::init(small(2)).unwrap(), &c, &tr, &va, &mut |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.last.params(), b.last.params());
    assert!(a.curves.iter().all(|r| r.seconds == 0.0));

    let other = train(
        Model::<f32>::init(small(2)).unwrap(),
        &TrainConfig { seed: 6, ..c.clone() },
        &tr,
        &va,
        &mut |_| {},
    )
    .unwrap();
    assert_ne!(other.curves, a.curves, "shuffle seed had no effect");
}

#[test]
fn full_batch_sgd_with_small_lr_never_increases_loss() {
    let data = examples::<f64>(8, 8, 3);
    let batch: Vec<&Example<f64>> = data.iter().collect();
    let c = TrainConfig {
        lr: 1e-3,
        optimizer: OptimizerKind::Sgd,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let mut model = Model::<f64>::init(small(4)).unwrap();
    let mut opt = Optimizer::from_config(&c);
    let losses: Vec<f64> = (0..11)
        .map(|_| train_step(&mut model, &mut opt, &batch, None).unwrap())
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss went up: {losses:?}");
    }
    assert!(losses[10] < losses[0]);
}

#[test]
fn best_checkpoint_tracks_the_minimum_validation_epoch() {
    let tr = examples::<f32>(16, 8, 7);
    let va = examples::<f32>(6, 8, 8);
    let c = TrainConfig {
        lr: 3e-3,
        max_epochs: 8,
        patience: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let out = train(Model::<f32>::init(small(1)).unwrap(), &c, &tr, &va, &mut |_| {}).unwrap();
    let (best_epoch, best) = out
        .curves
        .iter()
        .map(|r| (r.epoch, r.val_rmse))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    assert_eq!(out.best_epoch, best_epoch);
    assert_eq!(out.best_val_rmse, best);
    assert_eq!(duadeep::train::rmse_on(&out.best, &va).unwrap(), best);
    match out.stop {
        StopReason::Patience => assert_eq!(out.curves.len(), best_epoch + 3),
        StopReason::MaxEpochs => assert_eq!(out.curves.len(), 8),
        StopReason::TargetReached => panic!("no target configured"),
    }
}

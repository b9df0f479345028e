mod common;

use common::rng;
use smes_core::layer::Activation;
use smes_core::train::{
    backward, evaluate, grad_check, relative_error, train, Batch, Optimizer, OptimizerKind,
    TrainConfig,
};
use smes_core::{generate, Error, Matrix, ModelDims, ModelSpec, MoeModel, RoutingMode, SynthSpec};

fn tiny_dims() -> ModelDims {
    ModelDims {
        features: 4,
        encoder_hidden: 4,
        d_in: 4,
        d_out: 3,
        experts: 4,
        tasks: 2,
    }
}

fn tiny_batch(seed: u64) -> Batch {
    use rand::Rng;
    let mut r = rng(seed);
    let x = Matrix::random_uniform(3, 4, 1.5, &mut r);
    let y = (0..3)
        .map(|_| (0..2).map(|_| r.gen_range(0..2u8)).collect())
        .collect();
    Batch::new(x, y).unwrap()
}

#[test]
fn grad_check_passes_on_ten_seeds() {
    for seed in 0..10 {
        let mut spec = ModelSpec::progressive(tiny_dims(), 1, 1).unwrap();
        spec.beta = 0.1;
        let mut model = MoeModel::init(spec, seed).unwrap();
        for r in &mut model.params_mut().routers.routers {
            for v in r.weight.data_mut() {
                *v *= 100.0;
            }
        }
        let report = grad_check(&model, &tiny_batch(seed + 50), 1e-4).unwrap();
        assert!(report.passed(), "seed {seed}: {report:#?}");
        assert_eq!(report.blocks.len(), 4 + 2 * 4 + 2 * 2 + 2 * 2);
    }
}

#[test]
fn relative_error_is_symmetric_and_floored() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert_eq!(relative_error(2.0, 1.0), relative_error(1.0, 2.0));
    assert!(relative_error(0.0, 1e-12) < 1e-6);
}

#[test]
fn lambda_scaling_scales_sgd_updates() {
    let mut spec = ModelSpec::progressive(tiny_dims(), 1, 1).unwrap();
    spec.beta = 0.0;
    let base = MoeModel::init(spec, 2).unwrap();
    let batch = tiny_batch(3);
    let mut scaled = base.clone();
    scaled.set_loss_weights(vec![2.5, 2.5]).unwrap();
    let step = |m: &MoeModel| {
        let mut next = m.clone();
        let ev = evaluate(m, &batch, None).unwrap();
        let g = backward(m, &batch, &ev).unwrap();
        Optimizer::new(OptimizerKind::Sgd, 0.01).step(next.params_mut(), &g);
        (ev.task_loss, next.params().flatten())
    };
    let (l1, p1) = step(&base);
    let (l2, p2) = step(&scaled);
    assert!((l2 - 2.5 * l1).abs() <= 1e-12 * l2);
    let p0 = base.params().flatten();
    for ((a, b), o) in p1.iter().zip(&p2).zip(&p0) {
        let (d1, d2) = (a - o, b - o);
        assert!((d2 - 2.5 * d1).abs() <= 1e-9 * d2.abs().max(1e-12));
    }
}

fn single_task_log(strength: f64, seed: u64) -> smes_core::InteractionLog {
    generate(&SynthSpec {
        users: 40,
        records_per_user: 25,
        features: 6,
        positive_rates: vec![0.4],
        signal_strength: vec![strength],
        correlation: 0.0,
        user_scale: 0.0,
        seed,
    })
    .unwrap()
}

#[test]
fn convex_case_loss_is_non_increasing() {
    let log = single_task_log(2.0, 5);
    let dims = ModelDims {
        features: 6,
        encoder_hidden: 6,
        d_in: 6,
        d_out: 1,
        experts: 1,
        tasks: 1,
    };
    let mut spec = ModelSpec::progressive(dims, 1, 0).unwrap();
    spec.expert_activation = Activation::Identity;
    let tc = TrainConfig {
        model: spec,
        learning_rate: 0.05,
        batch_size: log.len(),
        epochs: 30,
        seed: 1,
        optimizer: OptimizerKind::Sgd,
    };
    let out = train(&log, None, &tc).unwrap();
    for w in out.log.windows(2) {
        assert!(
            w[1].task_loss <= w[0].task_loss + 1e-12,
            "{} > {}",
            w[1].task_loss,
            w[0].task_loss
        );
    }
}

#[test]
fn separable_task_reaches_high_auc() {
    let log = single_task_log(40.0, 6);
    let dims = ModelDims {
        features: 6,
        encoder_hidden: 8,
        d_in: 8,
        d_out: 4,
        experts: 4,
        tasks: 1,
    };
    let tc = TrainConfig {
        model: ModelSpec::progressive(dims, 1, 1).unwrap(),
        learning_rate: 0.1,
        batch_size: 32,
        epochs: 20,
        seed: 2,
        optimizer: OptimizerKind::Sgd,
    };
    let out = train(&log, None, &tc).unwrap();
    let auc = out.log.last().unwrap().auc[0].unwrap();
    assert!(auc > 0.99, "auc {auc}");
}

#[test]
fn training_is_deterministic() {
    let log = generate(&SynthSpec {
        users: 30,
        records_per_user: 10,
        ..SynthSpec::default()
    })
    .unwrap();
    let dims = ModelDims {
        features: 16,
        encoder_hidden: 8,
        d_in: 8,
        d_out: 4,
        experts: 8,
        tasks: 3,
    };
    let tc = TrainConfig {
        model: ModelSpec::progressive(dims, 2, 1).unwrap(),
        learning_rate: 0.05,
        batch_size: 32,
        epochs: 3,
        seed: 4,
        optimizer: OptimizerKind::adam(),
    };
    let a = train(&log, None, &tc).unwrap();
    let b = train(&log, None, &tc).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn divergence_is_reported() {
    let log = single_task_log(2.0, 8);
    let dims = ModelDims {
        features: 6,
        encoder_hidden: 4,
        d_in: 4,
        d_out: 2,
        experts: 4,
        tasks: 1,
    };
    let mut spec = ModelSpec::progressive(dims, 1, 1).unwrap();
    spec.expert_activation = Activation::Identity;
    let tc = TrainConfig {
        model: spec,
        learning_rate: 1e200,
        batch_size: 50,
        epochs: 3,
        seed: 1,
        optimizer: OptimizerKind::Sgd,
    };
    match train(&log, None, &tc) {
        Err(Error::Diverged { snapshot, .. }) => assert!(snapshot.contains("task_loss")),
        Err(Error::NonFinite(_)) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn dense_mode_trains() {
    let log = single_task_log(5.0, 9);
    let dims = ModelDims {
        features: 6,
        encoder_hidden: 4,
        d_in: 4,
        d_out: 2,
        experts: 3,
        tasks: 1,
    };
    let mut spec = ModelSpec::progressive(dims, 1, 1).unwrap();
    spec.mode = RoutingMode::Dense;
    let tc = TrainConfig {
        model: spec,
        learning_rate: 0.1,
        batch_size: 50,
        epochs: 2,
        seed: 1,
        optimizer: OptimizerKind::Sgd,
    };
    let out = train(&log, None, &tc).unwrap();
    assert_eq!(out.log[0].mean_union, 3.0);
    assert!((out.log[0].l_lb - 1.0).abs() < 1e-12);
}

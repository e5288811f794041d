use super::*;
use crate::data::{generate_sbm, make_splits, SbmSpec};
use crate::graph::Graph;
use crate::model::train::eval_pass;
use crate::smp::LambdaMode;

fn config(
    kind: ModelKind,
    in_dim: usize,
    hidden: usize,
    classes: usize,
    layers: usize,
    mode: QuantMode,
) -> ModelConfig {
    ModelConfig {
        kind,
        in_dim,
        hidden,
        classes,
        layers,
        dropout: 0.0,
        mode,
        gamma0: 1.0,
        smp: SmpConfig::default(),
    }
}

fn triangle() -> Graph {
    Graph::build(&[(0, 1), (1, 2), (0, 2)], 3).unwrap()
}

#[test]
fn fp_gcn_matches_dense_transcription() {
    let g = triangle();
    let model = Model::new(config(ModelKind::Gcn, 2, 2, 2, 2, QuantMode::Fp), 1).unwrap();
    let x = DenseMatrix::from_rows(&[&[1.0, 0.5], &[-0.5, 2.0], &[0.0, 1.0]]).unwrap();
    let logits = eval_pass(&model, &g, &x).unwrap().logits;
    let a = g.normalized_adjacency_dense();
    let h = a
        .matmul(&x)
        .unwrap()
        .matmul(model.weight(0))
        .unwrap()
        .map(|v| v.max(0.0));
    let want = a.matmul(&h).unwrap().matmul(model.weight(1)).unwrap();
    assert!(logits.max_abs_diff(&want) < 1e-10);
}

#[test]
fn logits_shape_in_every_mode() {
    let g = triangle();
    let x = DenseMatrix::filled(3, 4, 0.3);
    let modes = [
        QuantMode::Fp,
        QuantMode::Qat { bits: 4 },
        QuantMode::QatBt {
            b1: 8,
            b2: 2,
            skew_aware: true,
            classes: ClassMask::ALL,
        },
    ];
    for kind in [ModelKind::Gcn, ModelKind::Smp] {
        for mode in modes {
            let model = Model::new(config(kind, 4, 5, 3, 3, mode), 2).unwrap();
            assert_eq!(eval_pass(&model, &g, &x).unwrap().logits.shape(), (3, 3));
        }
    }
}

#[test]
fn int8_close_to_fp_on_small_values() {
    let b = generate_sbm(&SbmSpec {
        seed: 3,
        blocks: 2,
        n: 20,
        p_in: 0.3,
        p_out: 0.05,
        feature_dim: 6,
        separation: 2.0,
    })
    .unwrap();
    let x = b.features.scale(1e-3);
    let fp = Model::new(config(ModelKind::Gcn, 6, 8, 2, 2, QuantMode::Fp), 4).unwrap();
    let mut q = Model::new(config(ModelKind::Gcn, 6, 8, 2, 2, QuantMode::Qat { bits: 8 }), 4).unwrap();
    for l in 0..2 {
        q.set_weight(l, fp.weight(l).clone()).unwrap();
    }
    let a = eval_pass(&fp, &b.graph, &x).unwrap().logits;
    let c = eval_pass(&q, &b.graph, &x).unwrap().logits;
    assert!(a.max_abs_diff(&c) < 1e-2);
}

#[test]
fn smp_without_propagation_is_an_mlp() {
    let g = triangle();
    let model = Model::new(config(ModelKind::Smp, 2, 3, 2, 0, QuantMode::Fp), 5).unwrap();
    let x = DenseMatrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0], &[-1.5, 0.25]]).unwrap();
    let logits = eval_pass(&model, &g, &x).unwrap().logits;
    let h = x.matmul(model.weight(0)).unwrap().map(|v| v.max(0.0));
    let want = h.matmul(model.weight(1)).unwrap();
    assert!(logits.max_abs_diff(&want) < 1e-12);
}

#[test]
fn smp_matches_appnp() {
    let b = generate_sbm(&SbmSpec {
        seed: 8,
        blocks: 3,
        n: 30,
        p_in: 0.3,
        p_out: 0.05,
        feature_dim: 5,
        separation: 2.0,
    })
    .unwrap();
    let mut cfg = config(ModelKind::Smp, 5, 6, 3, 10, QuantMode::Fp);
    cfg.smp = SmpConfig {
        eta_lambda: 0.0,
        ..SmpConfig::default()
    };
    let model = Model::new(cfg, 6).unwrap();
    let logits = eval_pass(&model, &b.graph, &b.features).unwrap().logits;
    let a = b.graph.normalized_adjacency_dense();
    let anchor = b
        .features
        .matmul(model.weight(0))
        .unwrap()
        .map(|v| v.max(0.0))
        .matmul(model.weight(1))
        .unwrap();
    let alpha = 1.0 / (1.0 + cfg.smp.mu);
    let mut h = anchor.clone();
    for _ in 0..10 {
        h = a
            .matmul(&h)
            .unwrap()
            .scale(1.0 - alpha)
            .add(&anchor.scale(alpha))
            .unwrap();
    }
    assert!(logits.max_abs_diff(&h) < 1e-8);
}

#[test]
fn evaluate_ties_and_bounds() {
    let logits = DenseMatrix::zeros(4, 3);
    let labels = vec![0, 1, 0, 2];
    assert_eq!(accuracy(&logits, &labels, &[0, 1, 2, 3]).unwrap(), 0.5);
    let perfect = DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
    assert_eq!(accuracy(&perfect, &[0, 1], &[0, 1]).unwrap(), 1.0);
    assert!(accuracy(&perfect, &[0, 1], &[]).is_err());
}

fn sbm_task() -> (crate::data::Bundle, crate::data::Splits) {
    let b = generate_sbm(&SbmSpec {
        seed: 21,
        blocks: 2,
        n: 80,
        p_in: 0.15,
        p_out: 0.01,
        feature_dim: 6,
        separation: 1.5,
    })
    .unwrap();
    let s = make_splits(&b.labels, 2, 1, 10, 20).unwrap();
    (b, s)
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let (b, s) = sbm_task();
    let mut model = Model::new(config(ModelKind::Gcn, 6, 8, 2, 2, QuantMode::Qat { bits: 4 }), 1).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &b.graph, &b.features, &b.labels, &s, &cfg).unwrap();
    assert_eq!(model, before);
    assert!(report.best_epoch.is_none());
    assert!(report.metrics.is_empty());
}

#[test]
fn training_is_deterministic_and_learns() {
    let (b, s) = sbm_task();
    let run = || {
        let mut cfg = config(ModelKind::Smp, 6, 8, 2, 4, QuantMode::Qat { bits: 8 });
        cfg.dropout = 0.5;
        cfg.smp.lambda_mode = LambdaMode::Free;
        let mut model = Model::new(cfg, 3).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            seed: 9,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &b.graph, &b.features, &b.labels, &s, &tc).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    assert!(r1.best_val_acc > 0.8, "{}", r1.best_val_acc);
    let best = r1.best_epoch.unwrap();
    assert!(r1.metrics.iter().take(best).all(|m| m.val_acc < r1.best_val_acc));
}

#[test]
fn gamma_stays_clamped() {
    let (b, s) = sbm_task();
    let mut model = Model::new(config(ModelKind::Gcn, 6, 8, 2, 2, QuantMode::Qat { bits: 2 }), 1).unwrap();
    let tc = TrainConfig {
        epochs: 10,
        lr_gamma: 5.0,
        ..TrainConfig::default()
    };
    train(&mut model, &b.graph, &b.features, &b.labels, &s, &tc).unwrap();
    for (class, layer) in model.config().hooks() {
        let gm = model.gamma(class, layer).unwrap();
        assert!((GAMMA_MIN_TEST..=10.0).contains(&gm));
    }
}

const GAMMA_MIN_TEST: f64 = crate::quant::GAMMA_MIN;

#[test]
fn config_validation() {
    let mut c = config(ModelKind::Gcn, 4, 4, 2, 0, QuantMode::Fp);
    assert!(c.validate().is_err());
    c.layers = 2;
    c.dropout = 1.0;
    assert!(c.validate().is_err());
    c.dropout = 0.5;
    c.mode = QuantMode::Qat { bits: 3 };
    assert!(c.validate().is_err());
    c.mode = QuantMode::QatBt {
        b1: 2,
        b2: 8,
        skew_aware: false,
        classes: ClassMask::ALL,
    };
    assert!(c.validate().is_err());
}

#[test]
fn feature_width_is_checked() {
    let g = triangle();
    let model = Model::new(config(ModelKind::Gcn, 2, 2, 2, 2, QuantMode::Fp), 1).unwrap();
    assert!(eval_pass(&model, &g, &DenseMatrix::zeros(3, 5)).is_err());
}

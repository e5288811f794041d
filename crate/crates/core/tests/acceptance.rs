//! Acceptance criteria 1–10, one status line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in
//! `cargo test` output. Exit status is non-zero when any evaluated criterion
//! fails. A criterion whose input data is missing prints `FAIL (blocked)` and
//! does not change the exit status.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use qgnn::cli::{load_data, splits_for};
use qgnn::config::{DataSource, ExperimentConfig};
use qgnn::data::{dataset_path, generate_sbm, SbmSpec, EDGES_FILE, FEATURES_FILE, LABELS_FILE};
use qgnn::infer::{benchmark, BenchConfig, QuantizedModel};
use qgnn::model::{
    eval_pass, train, ElementClass, EpochMetrics, ForwardOptions, Model, ModelConfig, ModelKind, QuantMode, TrainReport,
};
use qgnn::quant::{self, PackedTensor, QuantConfig, QuantParams};
use qgnn::smp::{self, LambdaMode, SmpConfig, SmpState, Stage};
use qgnn::tape::{NodeId, Tape};
use qgnn::truncation::{moments, truncate_bt, truncate_bt_star, TruncationSpec};
use qgnn::{DenseMatrix, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

// Tolerances.
const GRANULAR_SLACK: f64 = 1e-9;
const GAMMA_FD_REL: f64 = 1e-6;
const SMOOTHNESS_REL: f64 = 1e-10;
const BDMM_ABS: f64 = 1e-10;
const APPNP_ABS: f64 = 1e-8;
const GRAD_REL: f64 = 1e-4;
const CORA_FP_RANGE: (f64, f64) = (77.5, 84.0);
const CORA_INT8_GAP: f64 = 1.5;
const CORA_INT2_MIN: f64 = 69.0;
const SMP_FP_MIN: f64 = 80.0;
const SMP_INT8_GAP: f64 = 1.5;
const SIZE_FP_MB: (f64, f64) = (1.746, 0.02);
const SIZE_INT8_MB: (f64, f64) = (0.441, 0.02);
const SIZE_INT4_MB: (f64, f64) = (0.223, 0.02);
const SIZE_INT2_MB: (f64, f64) = (0.114, 0.03);

enum Status {
    Pass,
    Fail,
    Blocked,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn blocked(detail: String) -> Outcome {
    Outcome {
        status: Status::Blocked,
        detail,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_edges(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// `Ã = D̂^{-1/2}(I + A)D̂^{-1/2}` assembled densely from the edge list.
fn dense_norm_adj(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j) in edges {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            a[i][j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    a
}

fn dense_mul(a: &[Vec<f64>], h: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = h[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| row.iter().zip(h).map(|(&x, hr)| x * hr[c]).sum())
                .collect()
        })
        .collect()
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &DenseMatrix) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (v - b.get(r, c)).abs()))
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let mut r = rng(101);
    let mut worst_granular = f64::NEG_INFINITY;
    let mut zp_ok = true;
    let mut pack_ok = true;
    let mut worst_fd: f64 = 0.0;
    let mut fd_points = 0usize;
    for bits in [2u8, 4, 8] {
        let qc = QuantConfig::new(bits).unwrap();
        for _ in 0..200 {
            let alpha = r.gen_range(-5.0..1.0);
            let beta = alpha + r.gen_range(0.1..6.0);
            let gamma = r.gen_range(0.2..2.0);
            let qp = QuantParams::new(alpha, beta, gamma).unwrap();
            let u: Vec<f64> = (0..64).map(|_| r.gen_range(alpha - 1.0..beta + 1.0)).collect();
            let out = quant::fake_quantize_full(&u, &qp, &qc, None).unwrap();
            let bound = qp.scale(&qc) / 2.0 + GRANULAR_SLACK;
            for ((&x, &y), &inside) in u.iter().zip(&out.values).zip(&out.in_range) {
                if inside {
                    worst_granular = worst_granular.max((x - y).abs() - bound);
                }
            }

            let other = QuantParams::new(alpha, beta, r.gen_range(0.01..9.0)).unwrap();
            zp_ok &= qp.zero_point(&qc) == other.zero_point(&qc);

            let (rows, cols) = (r.gen_range(1..6), r.gen_range(1..19));
            let codes: Vec<i32> = (0..rows * cols).map(|_| r.gen_range(0..=qc.max_code())).collect();
            let packed = PackedTensor::pack(&codes, rows, cols, bits, 1.0, 0).unwrap();
            pack_ok &= packed.unpack() == codes;

            // STE surrogate: γs·(c₀ + x(γ) − x(γ₀) − z) with x(γ) = u/(γs) + z.
            let s = qp.base_step(&qc);
            let z = f64::from(qp.zero_point(&qc));
            for (i, &x) in u.iter().enumerate() {
                let pos = x / (gamma * s) + z;
                let c0 = pos.round();
                let frac = (pos - pos.floor() - 0.5).abs();
                if !out.in_range[i] || frac < 1e-6 || c0 <= 0.0 || c0 >= qc.levels() {
                    continue;
                }
                let f = |g: f64| g * s * (c0 + (x / (g * s) + z) - pos - z);
                // Affine in γ, so a wide step adds no truncation error and less cancellation.
                let h = 1e-2 * gamma;
                let fd = (f(gamma + h) - f(gamma - h)) / (2.0 * h);
                let an = out.gamma_grad[i];
                worst_fd = worst_fd.max((fd - an).abs() / an.abs().max(1e-9));
                fd_points += 1;
            }
        }
    }
    let qp = QuantParams::new(0.0, 3.0, 2.0).unwrap();
    let qc = QuantConfig::new(2).unwrap();
    let example = quant::gamma_gradient(&[3.3], &qp, &qc)[0];
    let example_ok = (example - 0.35).abs() < 1e-12;
    verdict(
        worst_granular <= 0.0 && zp_ok && pack_ok && worst_fd < GAMMA_FD_REL && example_ok,
        format!(
            "granular excess {worst_granular:.2e} (<= 0), zero point invariant {zp_ok}, pack identity {pack_ok}, \
             gamma grad max rel err {worst_fd:.2e} over {fd_points} points (< {GAMMA_FD_REL:e}), \
             example {example:.6} (0.35)"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn edge_sum_smoothness(n: usize, edges: &[(usize, usize)], delta: &DenseMatrix) -> f64 {
    let mut deg = vec![1.0f64; n];
    for &(i, j) in edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    let mut total = 0.0;
    for &(i, j) in edges {
        for c in 0..delta.cols() {
            let d = delta.get(i, c) / deg[i].sqrt() - delta.get(j, c) / deg[j].sqrt();
            total += d * d;
        }
    }
    total
}

fn criterion_2() -> Outcome {
    let mut worst_s: f64 = 0.0;
    let mut worst_step: f64 = 0.0;
    let mut worst_scalar: f64 = 0.0;
    let mut worst_appnp: f64 = 0.0;
    for seed in 0..10u64 {
        let mut r = rng(200 + seed);
        let n = r.gen_range(20..=50);
        let edges = random_edges(&mut r, n, 0.15);
        let g = Graph::build(&edges, n).unwrap();
        let d = r.gen_range(1..5);
        let (h1, h0) = (random_matrix(&mut r, n, d), random_matrix(&mut r, n, d));

        let s = smp::layer_smoothness(&g, &h1, &h0).unwrap();
        let oracle = edge_sum_smoothness(n, &edges, &h1.sub(&h0).unwrap());
        worst_s = worst_s.max((s - oracle).abs() / oracle.abs().max(1e-300));

        // One step with an active multiplier, kept above the stability floor.
        let cfg = SmpConfig {
            mu: r.gen_range(0.5..8.0),
            eta_h: r.gen_range(0.05..0.3),
            eta_lambda: 1e-3,
            eta_s: 1e-3,
            delta0: 0.1,
            lambda_mode: LambdaMode::Free,
            ..SmpConfig::default()
        };
        let x = random_matrix(&mut r, n, d);
        let mut state = SmpState::new(&cfg, &g);
        state.lambda = r.gen_range(-0.5..0.5);
        state.slack = r.gen_range(0.5..1.5);
        let (lambda, slack) = (state.lambda, state.slack);
        let got = smp::bdmm_step(&g, &h0, &x, &mut state, &cfg).unwrap();

        let a = dense_norm_adj(n, &edges);
        let (hp, xr) = (to_rows(&h0), to_rows(&x));
        let ah = dense_mul(&a, &hp);
        let bar: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|c| {
                        (1.0 - (1.0 + cfg.mu) * cfg.eta_h) * hp[i][c]
                            + cfg.mu * cfg.eta_h * ah[i][c]
                            + cfg.eta_h * xr[i][c]
                    })
                    .collect()
            })
            .collect();
        let diff: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|c| bar[i][c] - hp[i][c]).collect()).collect();
        let adiff = dense_mul(&a, &diff);
        let next: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|c| bar[i][c] + 2.0 * cfg.eta_h * lambda * (diff[i][c] - adiff[i][c]))
                    .collect()
            })
            .collect();
        worst_step = worst_step.max(max_abs_diff(&next, &got));
        let slack_next = slack + 2.0 * cfg.eta_s * lambda * slack;
        let step: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|c| next[i][c] - hp[i][c]).collect())
            .collect();
        let s_l = edge_sum_smoothness(n, &edges, &DenseMatrix::new(n, d, step.concat()).unwrap());
        let lambda_next = lambda + cfg.eta_lambda * (cfg.delta0 * edges.len() as f64 - s_l - slack_next * slack_next);
        worst_scalar = worst_scalar
            .max((state.slack - slack_next).abs())
            .max((state.lambda - lambda_next).abs());

        // APPNP with teleport 1/(1+μ).
        let layers = 10;
        let mu = r.gen_range(1.0..9.0);
        let cfg = SmpConfig {
            mu,
            eta_h: 1.0 / (1.0 + mu),
            eta_lambda: 0.0,
            lambda0: 0.0,
            layers,
            ..SmpConfig::default()
        };
        let (h, _) = smp::propagate(&g, &x, &cfg).unwrap();
        let alpha = 1.0 / (1.0 + mu);
        let mut z = xr.clone();
        for _ in 0..layers {
            let az = dense_mul(&a, &z);
            z = (0..n)
                .map(|i| (0..d).map(|c| (1.0 - alpha) * az[i][c] + alpha * xr[i][c]).collect())
                .collect();
        }
        worst_appnp = worst_appnp.max(max_abs_diff(&z, &h));
    }
    verdict(
        worst_s < SMOOTHNESS_REL && worst_step < BDMM_ABS && worst_scalar < BDMM_ABS && worst_appnp < APPNP_ABS,
        format!(
            "smoothness rel {worst_s:.1e} (< {SMOOTHNESS_REL:e}), step abs {worst_step:.1e} and slack/multiplier abs \
             {worst_scalar:.1e} (< {BDMM_ABS:e}), APPNP abs {worst_appnp:.1e} (< {APPNP_ABS:e})"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between tape gradients of every input and central
/// differences of the scalar built by `build`.
fn grad_check<F>(graph: Option<&Graph>, inputs: &[DenseMatrix], build: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[DenseMatrix]| {
        let mut t = Tape::new(graph, 9, true);
        let ids: Vec<NodeId> = vals.iter().map(|v| t.leaf(v.clone())).collect();
        let out = build(&mut t, &ids);
        t.value(out).get(0, 0)
    };
    let mut t = Tape::new(graph, 9, true);
    let ids: Vec<NodeId> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
    let out = build(&mut t, &ids);
    let grads = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let an = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| DenseMatrix::zeros(inputs[k].rows(), inputs[k].cols()));
        for e in 0..inputs[k].len() {
            let h = 1e-6;
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(fd, an.data()[e]));
        }
    }
    worst
}

/// Values bounded away from zero so ReLU kinks stay out of reach.
fn off_kink(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    random_matrix(r, rows, cols).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn model_grad_check(kind: ModelKind, seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 10;
    let edges = random_edges(&mut r, n, 0.3);
    let g = Graph::build(&edges, n).unwrap();
    let x = random_matrix(&mut r, n, 5);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let rows: Vec<usize> = (0..n).collect();
    let cfg = ModelConfig {
        kind,
        in_dim: 5,
        hidden: 4,
        classes: 3,
        layers: if kind == ModelKind::Gcn { 2 } else { 4 },
        dropout: 0.0,
        mode: QuantMode::Fp,
        gamma0: 1.0,
        smp: SmpConfig {
            eta_lambda: 0.0,
            eta_s: 0.0,
            lambda0: -0.3,
            ..SmpConfig::default()
        },
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let loss = |m: &Model| {
        let mut t = Tape::new(Some(&g), 0, false);
        let f = m.forward(&mut t, &x, &ForwardOptions::default()).unwrap();
        let l = t.cross_entropy(f.logits, &labels, &rows).unwrap();
        (t.value(l).get(0, 0), t, f.params, l)
    };
    let (_, t, params, l) = loss(&model);
    let grads = t.backward(l).unwrap();
    let analytic: Vec<DenseMatrix> = params.iter().map(|p| grads.get(*p).unwrap().clone()).collect();
    drop(t);
    let mut worst: f64 = 0.0;
    for (idx, an) in analytic.iter().enumerate() {
        let base = model.params().value(idx).clone();
        for e in 0..base.len() {
            let h = 1e-6;
            let mut v = base.clone();
            v.data_mut()[e] += h;
            model.params_mut().set_value(idx, v.clone()).unwrap();
            let up = loss(&model).0;
            v.data_mut()[e] -= 2.0 * h;
            model.params_mut().set_value(idx, v).unwrap();
            let down = loss(&model).0;
            model.params_mut().set_value(idx, base.clone()).unwrap();
            worst = worst.max(rel_err((up - down) / (2.0 * h), an.data()[e]));
        }
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut r = rng(300);
    let n = 10;
    let edges = random_edges(&mut r, n, 0.3);
    let g = Graph::build(&edges, n).unwrap();
    let w34 = random_matrix(&mut r, 3, 4);
    let mut ops: Vec<(&str, f64)> = Vec::new();

    let (a, b) = (random_matrix(&mut r, 3, 4), random_matrix(&mut r, 4, 2));
    let wo = random_matrix(&mut r, 3, 2);
    ops.push((
        "matmul",
        grad_check(None, &[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            t.weighted_sum(m, wo.clone()).unwrap()
        }),
    ));
    let (a, b) = (random_matrix(&mut r, 3, 4), random_matrix(&mut r, 3, 4));
    ops.push((
        "add",
        grad_check(None, &[a, b], |t, v| {
            let m = t.add(v[0], v[1]).unwrap();
            t.weighted_sum(m, w34.clone()).unwrap()
        }),
    ));
    let (a, b) = (random_matrix(&mut r, 3, 4), random_matrix(&mut r, 1, 4));
    ops.push((
        "add_bias",
        grad_check(None, &[a, b], |t, v| {
            let m = t.add_bias(v[0], v[1]).unwrap();
            t.weighted_sum(m, w34.clone()).unwrap()
        }),
    ));
    ops.push((
        "scale",
        grad_check(None, &[random_matrix(&mut r, 3, 4)], |t, v| {
            let m = t.scale(v[0], -1.7);
            t.weighted_sum(m, w34.clone()).unwrap()
        }),
    ));
    ops.push((
        "relu",
        grad_check(None, &[off_kink(&mut r, 3, 4)], |t, v| {
            let m = t.relu(v[0]);
            t.weighted_sum(m, w34.clone()).unwrap()
        }),
    ));
    ops.push((
        "dropout",
        grad_check(None, &[random_matrix(&mut r, 3, 4)], |t, v| {
            let m = t.dropout(v[0], 0.4).unwrap();
            t.weighted_sum(m, w34.clone()).unwrap()
        }),
    ));
    ops.push((
        "sum",
        grad_check(None, &[random_matrix(&mut r, 3, 4)], |t, v| {
            let m = t.scale(v[0], 1.0);
            let m = t.relu(m);
            t.sum(m)
        }),
    ));
    let labels = vec![0, 2, 1, 3, 3, 0, 1, 2, 0, 1];
    let rows = vec![0, 2, 3, 5, 9];
    ops.push((
        "cross_entropy",
        grad_check(None, &[random_matrix(&mut r, 10, 4)], |t, v| {
            t.cross_entropy(v[0], &labels, &rows).unwrap()
        }),
    ));
    let w_n = random_matrix(&mut r, n, 3);
    ops.push((
        "spmm",
        grad_check(Some(&g), &[random_matrix(&mut r, n, 3)], |t, v| {
            let m = t.spmm(v[0]).unwrap();
            t.weighted_sum(m, w_n.clone()).unwrap()
        }),
    ));
    let coef = SmpConfig::default().coefficients();
    ops.push((
        "bdmm_mix",
        grad_check(
            Some(&g),
            &[random_matrix(&mut r, n, 3), random_matrix(&mut r, n, 3)],
            |t, v| {
                let m = t.bdmm_mix(v[0], v[1], coef).unwrap();
                t.weighted_sum(m, w_n.clone()).unwrap()
            },
        ),
    ));
    ops.push((
        "bdmm_correct",
        grad_check(
            Some(&g),
            &[random_matrix(&mut r, n, 3), random_matrix(&mut r, n, 3)],
            |t, v| {
                let m = t.bdmm_correct(v[0], v[1], -0.4).unwrap();
                t.weighted_sum(m, w_n.clone()).unwrap()
            },
        ),
    ));
    ops.push(("gcn forward", model_grad_check(ModelKind::Gcn, 301)));
    ops.push(("smp forward", model_grad_check(ModelKind::Smp, 302)));

    let worst = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let (name, _) = ops
        .iter()
        .cloned()
        .fold(("", -1.0), |acc, o| if o.1 > acc.1 { o } else { acc });
    verdict(
        worst < GRAD_REL,
        format!(
            "{} checks, worst rel err {worst:.1e} at {name} (< {GRAD_REL:e}); quantizing ops follow the \
             straight-through rule and are covered by criterion 1",
            ops.len()
        ),
    )
}

// ---------------------------------------------------------------- 4, 5, 6

fn cora_dir() -> Option<PathBuf> {
    let dir = dataset_path("cora");
    [EDGES_FILE, FEATURES_FILE, LABELS_FILE]
        .iter()
        .all(|f| dir.join(f).is_file())
        .then_some(dir)
}

fn cora_missing() -> String {
    format!(
        "Cora bundle not found at {} (set QGNN_DATA_DIR to a directory holding cora/)",
        dataset_path("cora").display()
    )
}

fn run(cfg: &ExperimentConfig) -> TrainReport {
    let bundle = load_data(cfg).unwrap();
    let splits = splits_for(cfg, &bundle).unwrap();
    let mcfg = cfg.model_config(bundle.features.cols(), bundle.classes).unwrap();
    let mut model = Model::new(mcfg, cfg.seed).unwrap();
    train(
        &mut model,
        &bundle.graph,
        &bundle.features,
        &bundle.labels,
        &splits,
        &cfg.train_config(),
    )
    .unwrap()
}

fn config(pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in pairs {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

/// Mean test accuracy in percent over split seeds 0..10.
fn mean_test(base: &ExperimentConfig, bits: Option<u8>) -> f64 {
    let total: f64 = (0..10u64)
        .map(|seed| {
            let mut cfg = base.clone();
            cfg.bits = bits;
            cfg.seed = seed;
            cfg.split_seed = seed;
            run(&cfg).test_acc
        })
        .sum();
    total * 10.0
}

fn criterion_4() -> Outcome {
    let Some(dir) = cora_dir() else {
        return blocked(cora_missing());
    };
    let mut base = config(&[("model", "gcn"), ("layers", "2")]);
    base.data = DataSource::Dir(dir);
    let fp = mean_test(&base, None);
    let int8 = mean_test(&base, Some(8));
    let int2 = mean_test(&base, Some(2));
    verdict(
        (CORA_FP_RANGE.0..=CORA_FP_RANGE.1).contains(&fp)
            && (int8 - fp).abs() <= CORA_INT8_GAP
            && int2 >= CORA_INT2_MIN,
        format!(
            "FP {fp:.2} in [{}, {}], INT8 {int8:.2} within {CORA_INT8_GAP} of FP, INT2 {int2:.2} >= {CORA_INT2_MIN}",
            CORA_FP_RANGE.0, CORA_FP_RANGE.1
        ),
    )
}

fn criterion_5() -> Outcome {
    let Some(dir) = cora_dir() else {
        return blocked(cora_missing());
    };
    let mut base = config(&[("model", "smp"), ("layers", "10")]);
    base.data = DataSource::Dir(dir);
    let fp = mean_test(&base, None);
    let int8 = mean_test(&base, Some(8));
    verdict(
        fp >= SMP_FP_MIN && (int8 - fp).abs() <= SMP_INT8_GAP,
        format!("SMP FP {fp:.2} >= {SMP_FP_MIN}, INT8 {int8:.2} within {SMP_INT8_GAP} of FP"),
    )
}

fn final_s_bar(cfg: &ExperimentConfig) -> f64 {
    run(cfg).metrics.last().and_then(|m| m.s_bar).unwrap_or(f64::NAN)
}

fn paired_s_bar(base: &ExperimentConfig) -> (f64, f64) {
    let mut smp_cfg = base.clone();
    smp_cfg.model = ModelKind::Smp;
    let mut gcn_cfg = base.clone();
    gcn_cfg.model = ModelKind::Gcn;
    (final_s_bar(&smp_cfg), final_s_bar(&gcn_cfg))
}

fn criterion_6() -> Outcome {
    let base = config(&[("layers", "10"), ("epochs", "200"), ("sbm_seed", "6")]);
    let (smp_sbm, gcn_sbm) = paired_s_bar(&base);
    let sbm_ok = smp_sbm < gcn_sbm;
    let sbm = format!("SBM: SMP {smp_sbm:.4e} < GCN {gcn_sbm:.4e}");
    let Some(dir) = cora_dir() else {
        return blocked(format!(
            "{sbm} ({}); {}",
            if sbm_ok { "holds" } else { "violated" },
            cora_missing()
        ));
    };
    let mut cora = base.clone();
    cora.data = DataSource::Dir(dir);
    let (smp_cora, gcn_cora) = paired_s_bar(&cora);
    verdict(
        sbm_ok && smp_cora < gcn_cora,
        format!("{sbm}; Cora: SMP {smp_cora:.4e} < GCN {gcn_cora:.4e}"),
    )
}

// ---------------------------------------------------------------- 7

fn quantize_observed(m: &DenseMatrix, qc: &QuantConfig) -> DenseMatrix {
    let (a, b) = quant::observe_range(m.data()).unwrap();
    let qp = QuantParams::new(a, b, 1.0).unwrap();
    DenseMatrix::new(m.rows(), m.cols(), quant::fake_quantize(m.data(), &qp, qc)).unwrap()
}

fn criterion_7() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for seed in 0..5u64 {
        let bundle = generate_sbm(&SbmSpec {
            seed: 700 + seed,
            blocks: 3,
            n: 50,
            p_in: 0.25,
            p_out: 0.03,
            feature_dim: 8,
            separation: 1.0,
        })
        .unwrap();
        let g = &bundle.graph;
        let spectrum = smp::laplacian_spectrum(g).unwrap();
        let cfg = SmpConfig::default();
        let delta = cfg.budget(g);
        let mut fp = vec![bundle.features.clone()];
        smp::propagate_with(g, &bundle.features, &cfg, |stage, _, m| {
            if stage == Stage::Corrected {
                fp.push(m.clone());
            }
            Ok(m)
        })
        .unwrap();
        for bits in [8u8, 4] {
            let qc = QuantConfig::new(bits).unwrap();
            let xq = quantize_observed(&bundle.features, &qc);
            let mut traj = vec![xq.clone()];
            smp::propagate_with(g, &xq, &cfg, |stage, _, m| {
                let q = quantize_observed(&m, &qc);
                if stage == Stage::Corrected {
                    traj.push(q.clone());
                }
                Ok(q)
            })
            .unwrap();
            for (l, (h, hq)) in fp.iter().zip(&traj).enumerate() {
                let rep = smp::error_bound(&spectrum, h, hq, &xq, l, delta).unwrap();
                checked += 1;
                if !rep.holds {
                    failures.push(format!(
                        "seed {seed} INT{bits} layer {l}: f_e {:.3e} > bound {:.3e} (eigen gap {:.3e})",
                        rep.f_e, rep.bound, rep.eigen_gap
                    ));
                }
            }
        }
    }
    for f in &failures {
        eprintln!("  error bound: {f}");
    }
    verdict(
        failures.is_empty(),
        format!(
            "{checked} layer checks over 5 graphs at INT8 and INT4, {} violations",
            failures.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn kappa_tail(metrics: &[EpochMetrics], class: Option<ElementClass>) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(50)..];
    let vals: Vec<f64> = tail
        .iter()
        .flat_map(|m| m.hooks.iter())
        .filter(|h| h.class != ElementClass::Weight && class.is_none_or(|c| h.class == c))
        .filter_map(|h| h.kappa_n)
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn criterion_8() -> Outcome {
    let mut r = rng(800);
    let skewed: Vec<f64> = LogNormal::new(0.0, 0.8)
        .unwrap()
        .sample_iter(&mut r)
        .take(20_000)
        .collect();
    let qc = QuantConfig::new(8).unwrap();
    let (a, b) = quant::observe_range(&skewed).unwrap();
    let qp = QuantParams::new(a, b, 1.0).unwrap();
    let codes = quant::quantize(&skewed, &qp, &qc);
    let spec = TruncationSpec::new(8, 2).unwrap();
    let sk_source = moments(&skewed).unwrap().skewness;
    let as_f = |c: Vec<i32>| c.into_iter().map(f64::from).collect::<Vec<_>>();
    let sk_bt = moments(&as_f(truncate_bt(&codes, &spec))).unwrap().skewness;
    let sk_bts = moments(&as_f(truncate_bt_star(&codes, &spec, sk_source)))
        .unwrap()
        .skewness;
    let synthetic_ok = sk_bts.abs() < sk_bt.abs();

    // Coauthor-CS proportions (15 classes, sparse), scaled to desk size.
    let base = config(&[
        ("model", "smp"),
        ("layers", "10"),
        ("hidden", "64"),
        ("epochs", "120"),
        ("sbm_blocks", "15"),
        ("sbm_nodes", "600"),
        ("sbm_p_in", "0.05"),
        ("sbm_p_out", "0.001"),
        ("sbm_features", "128"),
        ("sbm_separation", "2.0"),
        ("train_per_class", "20"),
        ("val_size", "100"),
        ("bits", "2"),
    ]);
    let int2 = run(&base).metrics;
    let mut bts_cfg = base.clone();
    bts_cfg.set("bt", "bt-star").unwrap();
    bts_cfg.set("bt_from", "8").unwrap();
    let bts = run(&bts_cfg).metrics;
    let (k_int2, k_bts) = (kappa_tail(&int2, None), kappa_tail(&bts, None));
    let agg = Some(ElementClass::Aggregate);
    let (a_int2, a_bts) = (kappa_tail(&int2, agg), kappa_tail(&bts, agg));
    verdict(
        synthetic_ok && k_bts <= k_int2 && a_bts <= a_int2,
        format!(
            "lognormal skewness |BT*| {:.3} < |BT| {:.3}; final-50-epoch mean kappa_N BT* {k_bts:.3} <= INT2 \
             {k_int2:.3} (aggregate hooks {a_bts:.3} <= {a_int2:.3})",
            sk_bts.abs(),
            sk_bt.abs()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn export_size(mode: QuantMode, dir: &Path) -> usize {
    let cfg = ModelConfig {
        kind: ModelKind::Gcn,
        in_dim: 6805,
        hidden: 64,
        classes: 15,
        layers: 2,
        dropout: 0.5,
        mode,
        gamma0: 1.0,
        smp: SmpConfig::default(),
    };
    let model = Model::new(cfg, 0).unwrap();
    let mut r = rng(900);
    let n = 30;
    let g = Graph::build(&random_edges(&mut r, n, 0.2), n).unwrap();
    let x = DenseMatrix::new(n, 6805, (0..n * 6805).map(|_| f64::from(r.gen_range(0u8..2))).collect()).unwrap();
    let calibration = eval_pass(&model, &g, &x).unwrap().calibration;
    let exp = ExperimentConfig {
        hidden: 64,
        bits: mode.source_bits(),
        ..ExperimentConfig::default()
    };
    let meta = exp.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let qm = QuantizedModel::from_trained(&model, &calibration, meta).unwrap();
    let path = dir.join(format!("cs_{}.qgnn", qm.bits()));
    qm.save(&path).unwrap()
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, mode, (target, tol)) in [
        ("FP", QuantMode::Fp, SIZE_FP_MB),
        ("INT8", QuantMode::Qat { bits: 8 }, SIZE_INT8_MB),
        ("INT4", QuantMode::Qat { bits: 4 }, SIZE_INT4_MB),
        ("INT2", QuantMode::Qat { bits: 2 }, SIZE_INT2_MB),
    ] {
        let bytes = export_size(mode, dir.path());
        let mb = bytes as f64 / 1e6;
        let dev = (mb - target).abs() / target;
        ok &= dev <= tol;
        parts.push(format!(
            "{name} {bytes} B ({:+.2}% vs {target} MB, tol {:.0}%)",
            100.0 * (mb - target) / target,
            tol * 100.0
        ));
    }
    verdict(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let bundle = generate_sbm(&SbmSpec {
        seed: 10,
        blocks: 4,
        n: 1000,
        p_in: 0.02,
        p_out: 0.002,
        feature_dim: 64,
        separation: 1.0,
    })
    .unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [QuantMode::Fp, QuantMode::Qat { bits: 8 }, QuantMode::Qat { bits: 2 }] {
        let cfg = ModelConfig {
            kind: ModelKind::Gcn,
            in_dim: 64,
            hidden: 64,
            classes: 4,
            layers: 2,
            dropout: 0.0,
            mode,
            gamma0: 1.0,
            smp: SmpConfig::default(),
        };
        let model = Model::new(cfg, 1).unwrap();
        let cal = eval_pass(&model, &bundle.graph, &bundle.features).unwrap().calibration;
        let qm = QuantizedModel::from_trained(&model, &cal, vec![]).unwrap();
        let rep = benchmark(
            &qm,
            &bundle.graph,
            &bundle.features,
            &BenchConfig {
                warmup: 1,
                repeats: 5,
                threads: Some(1),
            },
        )
        .unwrap();
        ok &= rep.latency_ms.is_finite() && rep.latency_ms > 0.0 && rep.model_bytes > 0;
        parts.push(format!(
            "{}-bit {:.2} ms {} B",
            rep.bits, rep.latency_ms, rep.model_bytes
        ));
    }
    verdict(
        ok,
        format!(
            "reported only, no speedup asserted (1 CPU thread, 1000-node SBM): {}; GPU kernels, Reddit and \
             competitor methods are out of scope",
            parts.join(", ")
        ),
    )
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "quantizer correctness", criterion_1),
        (2, "propagation oracles", criterion_2),
        (3, "gradients", criterion_3),
        (4, "Cora GCN accuracy", criterion_4),
        (5, "Cora deep SMP accuracy", criterion_5),
        (6, "oversmoothing", criterion_6),
        (7, "quantization error bound", criterion_7),
        (8, "skew-aware truncation", criterion_8),
        (9, "model size", criterion_9),
        (10, "CPU benchmark report", criterion_10),
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Blocked => "FAIL (blocked)",
        };
        println!("criterion {id:>2} {tag}: {name}: {} [{secs:.1}s]", o.detail);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

//! Full-batch training with best-validation checkpoint selection.

use serde::Serialize;

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;
use crate::model::{accuracy, Calibration, ElementClass, ForwardOptions, Model, GROUP_GAMMA, GROUP_MODEL};
use crate::optim::{Adam, DecayMode, ParamGroup, ParamStore};
use crate::quant::{observe_range, GAMMA_MAX, GAMMA_MIN};
use crate::smp::{self, LayerRecord};
use crate::tape::Tape;
use crate::truncation::moments;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub wd: f64,
    pub lr_gamma: f64,
    pub wd_gamma: f64,
    pub decay: DecayMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            wd: 5e-4,
            lr_gamma: 0.001,
            wd_gamma: 1e-4,
            decay: DecayMode::Decoupled,
            seed: 0,
        }
    }
}

/// Range and shape statistics of one hook output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HookStats {
    pub class: ElementClass,
    pub layer: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: Option<f64>,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub kappa_n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub s_bar: Option<f64>,
    pub hooks: Vec<HookStats>,
    pub smp_trace: Vec<LayerRecord>,
}

impl EpochMetrics {
    /// Mean `κ_N` over the hooks of `class` that have moments.
    pub fn mean_kappa_n(&self, class: ElementClass) -> Option<f64> {
        mean(self.hooks.iter().filter(|h| h.class == class).filter_map(|h| h.kappa_n))
    }

    pub fn mean_abs_skewness(&self, class: ElementClass) -> Option<f64> {
        mean(
            self.hooks
                .iter()
                .filter(|h| h.class == class)
                .filter_map(|h| h.skewness.map(f64::abs)),
        )
    }

    /// Mean range width `β − α` over the hooks of `class`.
    pub fn mean_range(&self, class: ElementClass) -> Option<f64> {
        mean(self.hooks.iter().filter(|h| h.class == class).map(|h| h.beta - h.alpha))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Epoch of the returned parameters; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub test_acc: f64,
    pub metrics: Vec<EpochMetrics>,
    /// Activation ranges of the returned parameters' evaluation pass.
    pub calibration: Calibration,
}

/// Everything observed in one deterministic evaluation forward.
#[derive(Debug, Clone)]
pub struct EvalPass {
    pub logits: DenseMatrix,
    pub calibration: Calibration,
    pub hooks: Vec<HookStats>,
    pub s_bar: Option<f64>,
    pub smoothness: Vec<f64>,
    pub smp_trace: Vec<LayerRecord>,
    /// Values of the forward trajectory (see [`crate::model::Forward`]).
    pub trajectory: Vec<DenseMatrix>,
}

/// Evaluation forward without dropout, observing ranges.
pub fn eval_pass(model: &Model, g: &Graph, features: &DenseMatrix) -> Result<EvalPass> {
    eval_pass_with(model, g, features, &ForwardOptions::default())
}

pub fn eval_pass_with(model: &Model, g: &Graph, features: &DenseMatrix, opts: &ForwardOptions<'_>) -> Result<EvalPass> {
    let mut tape = Tape::new(Some(g), 0, false);
    let opts = ForwardOptions {
        training: false,
        ..*opts
    };
    let fwd = model.forward(&mut tape, features, &opts)?;
    let mut calibration = Calibration::new();
    let mut hooks = Vec::with_capacity(fwd.hooks.len());
    for h in &fwd.hooks {
        let value = tape.value(h.node);
        let (alpha, beta, gamma) = match tape.quant_record(h.node) {
            Some(r) => (r.params.alpha, r.params.beta, Some(r.params.gamma)),
            None => {
                let (a, b) = observe_range(value.data())?;
                (a, b, None)
            }
        };
        if h.class != ElementClass::Weight {
            calibration.insert((h.class, h.layer), (alpha, beta));
        }
        let m = moments(value.data()).ok();
        hooks.push(HookStats {
            class: h.class,
            layer: h.layer,
            alpha,
            beta,
            gamma,
            skewness: m.map(|m| m.skewness),
            kurtosis: m.map(|m| m.kurtosis),
            kappa_n: m.map(|m| m.kappa_n),
        });
    }
    let trajectory: Vec<DenseMatrix> = fwd.trajectory.iter().map(|&n| tape.value(n).clone()).collect();
    let (smoothness, smp_trace) = match &fwd.smp_state {
        Some(state) => (state.smoothness_trace(), state.trace.clone()),
        None => {
            let mut s = Vec::new();
            for pair in trajectory.windows(2) {
                if pair[0].shape() == pair[1].shape() {
                    s.push(smp::layer_smoothness(g, &pair[1], &pair[0])?);
                }
            }
            (s, Vec::new())
        }
    };
    let s_bar = match &fwd.smp_state {
        Some(_) => smp::mean_smoothness(&smoothness).ok(),
        None => mean(smoothness.iter().copied()),
    };
    Ok(EvalPass {
        logits: tape.value(fwd.logits).clone(),
        calibration,
        hooks,
        s_bar,
        smoothness,
        smp_trace,
        trajectory,
    })
}

/// Accuracy of the evaluation forward over `rows`.
pub fn evaluate(model: &Model, g: &Graph, features: &DenseMatrix, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("evaluation mask is empty"));
    }
    let pass = eval_pass(model, g, features)?;
    accuracy(&pass.logits, labels, rows)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn train(
    model: &mut Model,
    g: &Graph,
    features: &DenseMatrix,
    labels: &[usize],
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    splits.validate(g.n())?;
    if labels.len() != g.n() || features.rows() != g.n() {
        return Err(Error::shape("train", "features and labels must cover every node"));
    }
    let mut adam = Adam::new(vec![
        ParamGroup {
            lr: cfg.lr,
            wd: cfg.wd,
            decay: cfg.decay,
            clamp: None,
        },
        ParamGroup {
            lr: cfg.lr_gamma,
            wd: cfg.wd_gamma,
            decay: cfg.decay,
            clamp: Some((GAMMA_MIN, GAMMA_MAX)),
        },
    ]);
    debug_assert_eq!((GROUP_MODEL, GROUP_GAMMA), (0, 1));

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ParamStore, Calibration)> = None;
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new(Some(g), epoch_seed(cfg.seed, epoch), true);
        let opts = ForwardOptions {
            training: true,
            ..ForwardOptions::default()
        };
        let fwd = model.forward(&mut tape, features, &opts)?;
        let loss_node = tape
            .cross_entropy(fwd.logits, labels, &splits.train)
            .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        let loss = tape.value(loss_node).get(0, 0);
        let mut grads = tape.backward(loss_node)?;
        let param_grads: Vec<Option<DenseMatrix>> = fwd.params.iter().map(|&id| grads.take(id)).collect();
        drop(tape);
        adam.step(model.params_mut(), &param_grads)
            .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;

        let pass = eval_pass(model, g, features)?;
        let m = EpochMetrics {
            epoch,
            loss,
            train_acc: accuracy(&pass.logits, labels, &splits.train)?,
            val_acc: accuracy(&pass.logits, labels, &splits.val)?,
            test_acc: accuracy(&pass.logits, labels, &splits.test)?,
            s_bar: pass.s_bar,
            hooks: pass.hooks,
            smp_trace: pass.smp_trace,
        };
        if best.as_ref().is_none_or(|b| m.val_acc > b.1) {
            best = Some((epoch, m.val_acc, m.test_acc, model.params().clone(), pass.calibration));
        }
        metrics.push(m);
    }
    match best {
        Some((epoch, val, test, params, calibration)) => {
            *model.params_mut() = params;
            Ok(TrainReport {
                best_epoch: Some(epoch),
                best_val_acc: val,
                test_acc: test,
                metrics,
                calibration,
            })
        }
        None => {
            let pass = eval_pass(model, g, features)?;
            Ok(TrainReport {
                best_epoch: None,
                best_val_acc: accuracy(&pass.logits, labels, &splits.val)?,
                test_acc: accuracy(&pass.logits, labels, &splits.test)?,
                metrics,
                calibration: pass.calibration,
            })
        }
    }
}

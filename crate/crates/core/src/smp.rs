//! Smoothness-constrained propagation solved with the basic differential
//! multiplier method.
//!
//! One step mixes the previous embedding with its propagation and the
//! anchor features, then corrects the layer change along the Laplacian in
//! proportion to the current multiplier `λ`. The slack `s` and `λ` are
//! scalar bookkeeping, reset on every call to [`propagate`].

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;

/// Largest graph accepted by the dense eigendecomposition.
pub const ERROR_BOUND_MAX_NODES: usize = 500;
const EIGEN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// Sign-free multiplier of the slack equality.
    Free,
    /// Multiplier clamped at zero after every update.
    NonNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmpConfig {
    pub mu: f64,
    pub delta0: f64,
    pub layers: usize,
    pub eta_h: f64,
    pub eta_lambda: f64,
    pub eta_s: f64,
    pub lambda0: f64,
    pub slack0: f64,
    pub lambda_mode: LambdaMode,
}

impl Default for SmpConfig {
    fn default() -> Self {
        let mu = 6.0;
        Self {
            mu,
            delta0: 0.1,
            layers: 10,
            eta_h: 1.0 / (1.0 + mu),
            eta_lambda: 1e-5,
            eta_s: 1e-5,
            lambda0: 0.0,
            slack0: 1.0,
            lambda_mode: LambdaMode::Free,
        }
    }
}

impl SmpConfig {
    /// Lowest multiplier allowed, where the correction gain reaches −½.
    pub fn lambda_floor(&self) -> f64 {
        -1.0 / (4.0 * self.eta_h)
    }

    /// Validation; `eta_lambda` and `eta_s` may be zero to freeze the
    /// multiplier machinery.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mu,
            self.delta0,
            self.eta_h,
            self.eta_lambda,
            self.eta_s,
            self.lambda0,
            self.slack0,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("propagation config".into()));
        }
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config {
                    field: field.into(),
                    msg: msg.into(),
                })
            }
        };
        check(self.mu > 0.0, "mu", "must be positive")?;
        check(self.delta0 > 0.0, "delta0", "must be positive")?;
        check(self.eta_h > 0.0, "eta_h", "must be positive")?;
        check(self.eta_lambda >= 0.0, "eta_lambda", "must be non-negative")?;
        check(self.eta_s >= 0.0, "eta_s", "must be non-negative")
    }

    pub fn coefficients(&self) -> MixCoefficients {
        MixCoefficients {
            a: 1.0 - (1.0 + self.mu) * self.eta_h,
            b: self.mu * self.eta_h,
            c: self.eta_h,
        }
    }

    /// `δ = δ₀·|E|`
    pub fn budget(&self, g: &Graph) -> f64 {
        self.delta0 * g.num_edges() as f64
    }
}

/// Weights of `aH + bÃH + cX`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerRecord {
    /// 1-based propagation step.
    pub layer: usize,
    /// `S_l` of the change produced by this step.
    pub smoothness: f64,
    /// Multiplier used by this step's correction.
    pub lambda: f64,
    /// Slack after this step's update.
    pub slack: f64,
    /// Constraint value `δ − S_l − s²`.
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpState {
    pub lambda: f64,
    pub slack: f64,
    pub delta: f64,
    pub trace: Vec<LayerRecord>,
}

impl SmpState {
    pub fn new(cfg: &SmpConfig, g: &Graph) -> Self {
        Self {
            lambda: cfg.lambda0,
            slack: cfg.slack0,
            delta: cfg.budget(g),
            trace: Vec::with_capacity(cfg.layers),
        }
    }

    /// `2η_H·λ`, the gain of the correction term.
    pub fn correction_gain(&self, cfg: &SmpConfig) -> f64 {
        2.0 * cfg.eta_h * self.lambda
    }

    /// Slack then multiplier update after a step whose layer change has
    /// smoothness `smoothness`.
    pub fn advance(&mut self, smoothness: f64, cfg: &SmpConfig) -> Result<LayerRecord> {
        let layer = self.trace.len() + 1;
        let lambda = self.lambda;
        let slack = self.slack + 2.0 * cfg.eta_s * lambda * self.slack;
        let g = self.delta - smoothness - slack * slack;
        let mut next = lambda + cfg.eta_lambda * g;
        if cfg.lambda_mode == LambdaMode::NonNegative {
            next = next.max(0.0);
        }
        // With k ≥ −½ each spectral mode of a step is a convex mix of the
        // plain mixing step and the identity, so negative gains cannot amplify.
        next = next.max(cfg.lambda_floor());
        if !(slack.is_finite() && next.is_finite() && smoothness.is_finite()) {
            return Err(Error::Divergence(format!("propagation layer {layer}")));
        }
        self.slack = slack;
        self.lambda = next;
        let record = LayerRecord {
            layer,
            smoothness,
            lambda,
            slack,
            g,
        };
        self.trace.push(record);
        Ok(record)
    }

    pub fn smoothness_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.smoothness).collect()
    }
}

/// `tr(Δᵀ L̃ Δ)` with `Δ = h_cur − h_prev`.
pub fn layer_smoothness(g: &Graph, h_cur: &DenseMatrix, h_prev: &DenseMatrix) -> Result<f64> {
    g.laplacian_quadratic(&h_cur.sub(h_prev)?)
}

/// `aH + bÃH + cX`
pub fn bdmm_mix(g: &Graph, h: &DenseMatrix, x: &DenseMatrix, coef: MixCoefficients) -> Result<DenseMatrix> {
    if h.shape() != x.shape() {
        return Err(Error::shape("bdmm_mix", "embedding and anchor differ in shape"));
    }
    let ah = g.spmm(h)?;
    let data = h
        .data()
        .iter()
        .zip(ah.data())
        .zip(x.data())
        .map(|((&hv, &av), &xv)| coef.a * hv + coef.b * av + coef.c * xv)
        .collect();
    Ok(DenseMatrix::from_raw(h.rows(), h.cols(), data))
}

/// `H̄ + k(I − Ã)(H̄ − H)`
pub fn bdmm_correct(g: &Graph, bar: &DenseMatrix, prev: &DenseMatrix, gain: f64) -> Result<DenseMatrix> {
    let d = bar.sub(prev)?;
    let ad = g.spmm(&d)?;
    let data = bar
        .data()
        .iter()
        .zip(d.data())
        .zip(ad.data())
        .map(|((&b, &dv), &av)| b + gain * (dv - av))
        .collect();
    Ok(DenseMatrix::from_raw(bar.rows(), bar.cols(), data))
}

/// Stages of one step exposed to a [`propagate_with`] hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mixed,
    Corrected,
}

/// One full step: mix, correct, then slack and multiplier updates.
pub fn bdmm_step(
    g: &Graph,
    h_prev: &DenseMatrix,
    x: &DenseMatrix,
    state: &mut SmpState,
    cfg: &SmpConfig,
) -> Result<DenseMatrix> {
    bdmm_step_with(g, h_prev, x, state, cfg, &mut |_, _, m| Ok(m))
}

fn bdmm_step_with<F>(
    g: &Graph,
    h_prev: &DenseMatrix,
    x: &DenseMatrix,
    state: &mut SmpState,
    cfg: &SmpConfig,
    hook: &mut F,
) -> Result<DenseMatrix>
where
    F: FnMut(Stage, usize, DenseMatrix) -> Result<DenseMatrix>,
{
    let layer = state.trace.len() + 1;
    let bar = hook(Stage::Mixed, layer, bdmm_mix(g, h_prev, x, cfg.coefficients())?)?;
    let next = bdmm_correct(g, &bar, h_prev, state.correction_gain(cfg))?;
    let next = hook(Stage::Corrected, layer, next)?;
    if !next.is_finite() {
        return Err(Error::Divergence(format!("propagation layer {layer}")));
    }
    let s = layer_smoothness(g, &next, h_prev)?;
    state.advance(s, cfg)?;
    Ok(next)
}

/// `L` steps from `H⁰ = X`.
pub fn propagate(g: &Graph, x: &DenseMatrix, cfg: &SmpConfig) -> Result<(DenseMatrix, SmpState)> {
    propagate_with(g, x, cfg, |_, _, m| Ok(m))
}

/// [`propagate`] with a hook that may replace the mixed and corrected
/// embeddings of every step, for example with quantized copies.
pub fn propagate_with<F>(g: &Graph, x: &DenseMatrix, cfg: &SmpConfig, mut hook: F) -> Result<(DenseMatrix, SmpState)>
where
    F: FnMut(Stage, usize, DenseMatrix) -> Result<DenseMatrix>,
{
    cfg.validate()?;
    if x.rows() != g.n() {
        return Err(Error::shape(
            "propagate",
            format!("{} feature rows for {} nodes", x.rows(), g.n()),
        ));
    }
    let mut state = SmpState::new(cfg, g);
    let mut h = x.clone();
    for _ in 0..cfg.layers {
        h = bdmm_step_with(g, &h, x, &mut state, cfg, &mut hook)?;
    }
    Ok((h, state))
}

/// `S̄`: mean of `S_2..S_L` given the full trace `S_1..S_L`.
pub fn mean_smoothness(trace: &[f64]) -> Result<f64> {
    if trace.len() < 2 {
        return Err(Error::invalid(format!(
            "mean smoothness needs at least 2 layers, got {}",
            trace.len()
        )));
    }
    let tail = &trace[1..];
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorBoundReport {
    pub layer: usize,
    pub bound: f64,
    pub f_e: f64,
    pub holds: bool,
    /// Sum of reciprocals of the non-zero Laplacian eigenvalues.
    pub trace_pinv: f64,
    /// Smallest eigenvalue above the zero tolerance.
    pub eigen_gap: f64,
}

/// Spectral summary of `L̃` used by the quantization error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianSpectrum {
    pub trace_pinv: f64,
    pub eigen_gap: f64,
}

pub fn laplacian_spectrum(g: &Graph) -> Result<LaplacianSpectrum> {
    if g.n() > ERROR_BOUND_MAX_NODES {
        return Err(Error::invalid(format!(
            "dense eigendecomposition limited to {ERROR_BOUND_MAX_NODES} nodes, graph has {}",
            g.n()
        )));
    }
    let l = g.laplacian_dense();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(g.n(), g.n(), l.data()));
    let nonzero: Vec<f64> = eig.eigenvalues.iter().cloned().filter(|&v| v > EIGEN_TOL).collect();
    Ok(LaplacianSpectrum {
        trace_pinv: nonzero.iter().map(|v| 1.0 / v).sum(),
        eigen_gap: nonzero.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

/// Checks `f_e^l = ‖H^l − H^{l,q}‖² ≤ lδ·tr(Λ⁺) + ‖H^l − X^q‖²`.
pub fn error_bound(
    spectrum: &LaplacianSpectrum,
    h_l: &DenseMatrix,
    h_lq: &DenseMatrix,
    x_q: &DenseMatrix,
    layer: usize,
    delta: f64,
) -> Result<ErrorBoundReport> {
    let f_e = h_l.sub(h_lq)?.frobenius_sq();
    let bound = layer as f64 * delta * spectrum.trace_pinv + h_l.sub(x_q)?.frobenius_sq();
    Ok(ErrorBoundReport {
        layer,
        bound,
        f_e,
        holds: f_e <= bound,
        trace_pinv: spectrum.trace_pinv,
        eigen_gap: spectrum.eigen_gap,
    })
}

//! Affine quantization with a learnable range scale `γ`.
//!
//! Codes are unsigned levels `[0, 2^b − 1]`. The step is `s_γ = γ·s` with
//! `s = (β − α)/(2^b − 1)` and the zero point is taken from the unscaled
//! range, which makes it independent of `γ`. Rounding is half away from
//! zero (`f64::round`) everywhere, training and packed inference alike.

pub mod pack;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::truncation::{self, TruncationSpec};

pub use pack::PackedTensor;

pub const GAMMA_MIN: f64 = 1e-3;
pub const GAMMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u8,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            2 | 4 | 8 => Ok(Self { bits }),
            _ => Err(Error::invalid(format!(
                "bit width {bits} unsupported, expected 2, 4 or 8"
            ))),
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// `β_q`; `α_q` is always 0.
    pub fn max_code(&self) -> i32 {
        (1i32 << self.bits) - 1
    }

    pub fn levels(&self) -> f64 {
        self.max_code() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl QuantParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && gamma.is_finite()) {
            return Err(Error::NonFinite("quantization parameters".into()));
        }
        if beta <= alpha {
            return Err(Error::Degenerate(format!("range [{alpha}, {beta}] is empty")));
        }
        if gamma <= 0.0 {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { alpha, beta, gamma })
    }

    /// Unscaled step `s`.
    pub fn base_step(&self, qc: &QuantConfig) -> f64 {
        (self.beta - self.alpha) / qc.levels()
    }

    /// `s_γ = γ·s`
    pub fn scale(&self, qc: &QuantConfig) -> f64 {
        self.gamma * self.base_step(qc)
    }

    pub fn zero_point(&self, qc: &QuantConfig) -> i32 {
        zero_point_for(self.alpha, self.beta, qc)
    }
}

/// `⌊(β·α_q − α·β_q)/(β − α)⌉` with `α_q = 0`.
pub(crate) fn zero_point_for(alpha: f64, beta: f64, qc: &QuantConfig) -> i32 {
    ((0.0 * beta - alpha * qc.levels()) / (beta - alpha)).round() as i32
}

/// `(min, max)` of the tensor, widened by ±0.5 when constant.
pub fn observe_range(data: &[f64]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("cannot observe the range of an empty tensor"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        if !v.is_finite() {
            return Err(Error::NonFinite("observed tensor".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        Ok((lo - 0.5, hi + 0.5))
    } else {
        Ok((lo, hi))
    }
}

#[inline]
pub(crate) fn pre_clip_code(u: f64, scale: f64, zero: i32) -> f64 {
    (u / scale + zero as f64).round()
}

#[inline]
pub(crate) fn dequantize_code(code: i32, scale: f64, zero: i32) -> f64 {
    scale * (code as i64 - zero as i64) as f64
}

pub fn quantize(u: &[f64], qp: &QuantParams, qc: &QuantConfig) -> Vec<i32> {
    let scale = qp.scale(qc);
    let zero = qp.zero_point(qc);
    let top = qc.levels();
    u.iter()
        .map(|&x| pre_clip_code(x, scale, zero).clamp(0.0, top) as i32)
        .collect()
}

pub fn dequantize(codes: &[i32], qp: &QuantParams, qc: &QuantConfig) -> Result<Vec<f64>> {
    let scale = qp.scale(qc);
    let zero = qp.zero_point(qc);
    codes
        .iter()
        .map(|&c| {
            if c < 0 || c > qc.max_code() {
                Err(Error::CodeOutOfRange {
                    code: c as i64,
                    bits: qc.bits(),
                })
            } else {
                Ok(dequantize_code(c, scale, zero))
            }
        })
        .collect()
}

pub fn fake_quantize(u: &[f64], qp: &QuantParams, qc: &QuantConfig) -> Vec<f64> {
    let scale = qp.scale(qc);
    let zero = qp.zero_point(qc);
    quantize(u, qp, qc)
        .into_iter()
        .map(|c| dequantize_code(c, scale, zero))
        .collect()
}

/// Elementwise `∂û/∂γ` under the straight-through estimator: 0 below the
/// code range, `β_q` above it, `s(⌊u/s_γ + z⌉ − z) − u/γ` inside.
pub fn gamma_gradient(u: &[f64], qp: &QuantParams, qc: &QuantConfig) -> Vec<f64> {
    let scale = qp.scale(qc);
    let zero = qp.zero_point(qc);
    let s = qp.base_step(qc);
    u.iter()
        .map(|&x| gamma_gradient_at(x, pre_clip_code(x, scale, zero), s, qp.gamma, zero, qc))
        .collect()
}

#[inline]
fn gamma_gradient_at(u: f64, code: f64, s: f64, gamma: f64, zero: i32, qc: &QuantConfig) -> f64 {
    if code < 0.0 {
        0.0
    } else if code > qc.levels() {
        qc.levels()
    } else {
        s * (code - zero as f64) - u / gamma
    }
}

/// Truncation applied after the `b₁`-bit quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub spec: TruncationSpec,
    pub skew_aware: bool,
}

/// Everything the STE needs from one fake-quantize evaluation.
#[derive(Debug, Clone)]
pub struct FakeQuantOutput {
    pub values: Vec<f64>,
    /// Codes on the `b₁` grid, after truncation when enabled.
    pub codes: Vec<i32>,
    pub in_range: Vec<bool>,
    pub gamma_grad: Vec<f64>,
    pub scale: f64,
    pub zero: i32,
    /// `⌊sk⌉` shift used by skew-aware truncation.
    pub shift: i32,
}

/// Quantize, optionally truncate, and dequantize in one pass.
pub fn fake_quantize_full(
    u: &[f64],
    qp: &QuantParams,
    qc: &QuantConfig,
    trunc: Option<&Truncation>,
) -> Result<FakeQuantOutput> {
    let scale = qp.scale(qc);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Degenerate(format!("quantization step {scale}")));
    }
    if let Some(t) = trunc {
        if t.spec.b1() != qc.bits() {
            return Err(Error::invalid(format!(
                "truncation source width {} differs from quantizer width {}",
                t.spec.b1(),
                qc.bits()
            )));
        }
    }
    let zero = qp.zero_point(qc);
    let s = qp.base_step(qc);
    let top = qc.levels();
    let shift = match trunc {
        Some(t) if t.skew_aware => skew_shift(u),
        _ => 0,
    };
    let n = u.len();
    let mut values = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    let mut in_range = Vec::with_capacity(n);
    let mut gamma_grad = Vec::with_capacity(n);
    for &x in u {
        let raw = pre_clip_code(x, scale, zero);
        in_range.push((0.0..=top).contains(&raw));
        gamma_grad.push(gamma_gradient_at(x, raw, s, qp.gamma, zero, qc));
        let mut code = raw.clamp(0.0, top) as i32;
        if let Some(t) = trunc {
            code = t.spec.snap(code, shift);
        }
        codes.push(code);
        values.push(dequantize_code(code, scale, zero));
    }
    Ok(FakeQuantOutput {
        values,
        codes,
        in_range,
        gamma_grad,
        scale,
        zero,
        shift,
    })
}

/// `⌊sk⌉` of the tensor; zero when the tensor is constant.
pub fn skew_shift(u: &[f64]) -> i32 {
    match truncation::moments(u) {
        Ok(m) => m.skewness.round() as i32,
        Err(_) => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseReport {
    pub overload: f64,
    pub granular: f64,
    pub total: f64,
}

/// Splits the summed squared error into clipped (overload) and in-range
/// (granular) contributions.
pub fn mse_decomposition(samples: &[f64], qp: &QuantParams, qc: &QuantConfig) -> Result<MseReport> {
    if samples.is_empty() {
        return Err(Error::invalid("mse decomposition needs samples"));
    }
    let scale = qp.scale(qc);
    let zero = qp.zero_point(qc);
    let top = qc.levels();
    let mut overload = 0.0;
    let mut granular = 0.0;
    for &u in samples {
        let raw = pre_clip_code(u, scale, zero);
        let err = u - dequantize_code(raw.clamp(0.0, top) as i32, scale, zero);
        if (0.0..=top).contains(&raw) {
            granular += err * err;
        } else {
            overload += err * err;
        }
    }
    Ok(MseReport {
        overload,
        granular,
        total: overload + granular,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub bits: u8,
    pub gamma: f64,
    pub s_gamma: f64,
    /// Mean squared error in units of the squared step.
    pub e_gamma: f64,
    /// Mean squared error.
    pub f_e: f64,
    pub overload: f64,
    pub granular: f64,
}

/// Quantization error of a fixed sample over a grid of `γ` and bit widths,
/// with the range observed once from the sample.
pub fn gamma_sweep(samples: &[f64], bits: &[u8], gammas: &[f64]) -> Result<Vec<SweepRow>> {
    let (alpha, beta) = observe_range(samples)?;
    let n = samples.len() as f64;
    let mut rows = Vec::with_capacity(bits.len() * gammas.len());
    for &b in bits {
        let qc = QuantConfig::new(b)?;
        for &g in gammas {
            let qp = QuantParams::new(alpha, beta, g)?;
            let rep = mse_decomposition(samples, &qp, &qc)?;
            let s_gamma = qp.scale(&qc);
            let f_e = rep.total / n;
            rows.push(SweepRow {
                bits: b,
                gamma: g,
                s_gamma,
                e_gamma: f_e / (s_gamma * s_gamma),
                f_e,
                overload: rep.overload / n,
                granular: rep.granular / n,
            });
        }
    }
    Ok(rows)
}

//! Bitwise truncation of `b₁`-bit codes to `b₂` bits, with an optional
//! skewness shift, and the moment statistics used to monitor it.
//!
//! Truncated values stay on the `b₁` grid (`c₂·s₀`), so the `b₁` scale and
//! zero point still dequantize them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSpec {
    b1: u8,
    b2: u8,
}

impl TruncationSpec {
    pub fn new(b1: u8, b2: u8) -> Result<Self> {
        QuantConfig::new(b1)?;
        QuantConfig::new(b2)?;
        if b2 > b1 {
            return Err(Error::invalid(format!("cannot truncate {b1}-bit codes to {b2} bits")));
        }
        Ok(Self { b1, b2 })
    }

    pub fn b1(&self) -> u8 {
        self.b1
    }

    pub fn b2(&self) -> u8 {
        self.b2
    }

    /// `s₀ = (2^{b₁} − 1)/(2^{b₂} − 1)`, exact for the supported widths.
    pub fn s0(&self) -> i32 {
        ((1i32 << self.b1) - 1) / ((1i32 << self.b2) - 1)
    }

    /// The `b₂`-level code of a `b₁` code shifted by `shift`.
    pub fn target_code(&self, code: i32, shift: i32) -> i32 {
        let top = ((1i32 << self.b2) - 1) as f64;
        ((code + shift) as f64 / self.s0() as f64).round().clamp(0.0, top) as i32
    }

    /// The truncated value on the `b₁` grid.
    pub fn snap(&self, code: i32, shift: i32) -> i32 {
        self.target_code(code, shift) * self.s0()
    }
}

pub fn truncate_bt(codes: &[i32], spec: &TruncationSpec) -> Vec<i32> {
    codes.iter().map(|&c| spec.snap(c, 0)).collect()
}

/// Truncation after shifting every code by `⌊sk⌉`.
pub fn truncate_bt_star(codes: &[i32], spec: &TruncationSpec, skewness: f64) -> Vec<i32> {
    let shift = skewness.round() as i32;
    codes.iter().map(|&c| spec.snap(c, shift)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub skewness: f64,
    pub kurtosis: f64,
    /// `|κ − 3|`
    pub kappa_n: f64,
}

/// Population skewness and kurtosis.
pub fn moments(data: &[f64]) -> Result<MomentReport> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty sample".into()));
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in data {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2.is_nan() || m2 <= 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    let skewness = m3 / m2.powf(1.5);
    let kurtosis = m4 / (m2 * m2);
    Ok(MomentReport {
        skewness,
        kurtosis,
        kappa_n: (kurtosis - 3.0).abs(),
    })
}

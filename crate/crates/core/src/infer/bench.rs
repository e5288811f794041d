//! CPU latency measurement of packed inference. Reports numbers only.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::infer::QuantizedModel;
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
    /// Worker threads for the sparse kernels; `None` pins timing to one.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 1,
            repeats: 10,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub bits: u8,
    pub latency_ms: f64,
    pub nodes_per_s: f64,
    /// Serialized size of the model.
    pub model_bytes: usize,
    /// Resident weight payload and bias bytes.
    pub weight_bytes: usize,
    pub repeats: usize,
}

/// Median wall-clock latency of [`QuantizedModel::infer`] over `repeats`
/// timed runs after `warmup` discarded ones.
pub fn benchmark(model: &QuantizedModel, g: &Graph, features: &DenseMatrix, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 {
        return Err(Error::invalid("benchmark needs at least one timed repeat"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let samples = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..cfg.warmup {
            model.infer(g, features)?;
        }
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            model.infer(g, features)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(samples)
    })?;
    let latency_ms = median(samples);
    Ok(BenchReport {
        bits: model.bits(),
        latency_ms,
        nodes_per_s: g.n() as f64 / (latency_ms / 1e3).max(f64::MIN_POSITIVE),
        model_bytes: model.to_bytes()?.len(),
        weight_bytes: model.weight_bytes(),
        repeats: cfg.repeats,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

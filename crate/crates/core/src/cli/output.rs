//! CSV tables and the run manifest.
//!
//! Floats are written in their shortest exact form, so identical runs give
//! identical files.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cli::{resolve_data_dir, CONFIG_FILE, METRICS_FILE, MODEL_FILE, MOMENTS_FILE, TRACE_FILE};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE};
use crate::error::Result;
use crate::model::{ElementClass, EpochMetrics};

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub(crate) fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "loss",
        "train_acc",
        "val_acc",
        "test_acc",
        "s_bar",
        "mean_abs_sk",
        "mean_kappa_n",
        "aggregate_abs_sk",
        "aggregate_kappa_n",
    ])?;
    for m in metrics {
        let activations = || m.hooks.iter().filter(|h| h.class != ElementClass::Weight);
        w.write_record([
            m.epoch.to_string(),
            f(m.loss),
            f(m.train_acc),
            f(m.val_acc),
            f(m.test_acc),
            opt(m.s_bar),
            opt(mean(activations().filter_map(|h| h.skewness.map(f64::abs)))),
            opt(mean(activations().filter_map(|h| h.kappa_n))),
            opt(m.mean_abs_skewness(ElementClass::Aggregate)),
            opt(m.mean_kappa_n(ElementClass::Aggregate)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_moments(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch", "class", "layer", "alpha", "beta", "gamma", "skewness", "kurtosis", "kappa_n",
    ])?;
    for m in metrics {
        for h in &m.hooks {
            w.write_record([
                m.epoch.to_string(),
                h.class.to_string(),
                h.layer.to_string(),
                f(h.alpha),
                f(h.beta),
                opt(h.gamma),
                opt(h.skewness),
                opt(h.kurtosis),
                opt(h.kappa_n),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn write_trace(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "layer", "smoothness", "lambda", "slack", "g"])?;
    for m in metrics {
        for r in &m.smp_trace {
            w.write_record([
                m.epoch.to_string(),
                r.layer.to_string(),
                f(r.smoothness),
                f(r.lambda),
                f(r.slack),
                f(r.g),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Serialized rows to `out`, or to stdout.
pub(crate) fn write_rows<T: Serialize>(out: Option<&Path>, rows: &[T]) -> Result<()> {
    match out {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        None => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Content hash over a git-style `blob <len>\0` header and the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// The manifest is the config text followed by comment lines with input
/// and output hashes, so it parses as a config that repeats the run.
pub(crate) fn write_manifest(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# qgnn {} run manifest", env!("CARGO_PKG_VERSION"));
    s.push_str(&cfg.to_text());
    match &cfg.data {
        DataSource::Sbm => {
            let _ = writeln!(s, "# input generated from the sbm_* keys");
        }
        DataSource::Dir(p) => {
            let dir = resolve_data_dir(p);
            let _ = writeln!(s, "# input dir {}", dir.display());
            for name in [EDGES_FILE, FEATURES_FILE, LABELS_FILE, SPLITS_FILE] {
                if let Ok(bytes) = fs::read(dir.join(name)) {
                    let _ = writeln!(s, "# input {name} {} bytes={}", content_hash(&bytes), bytes.len());
                }
            }
        }
    }
    for name in [CONFIG_FILE, METRICS_FILE, MOMENTS_FILE, TRACE_FILE, MODEL_FILE] {
        if let Ok(bytes) = fs::read(out.join(name)) {
            let _ = writeln!(s, "# output {name} {} bytes={}", content_hash(&bytes), bytes.len());
        }
    }
    fs::write(out.join(crate::cli::MANIFEST_FILE), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_layout() {
        // sha256 of "blob 0\0", computed independently.
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}

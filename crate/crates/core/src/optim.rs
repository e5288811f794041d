//! Parameter storage and Adam with per-group learning rate and decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayMode {
    /// `p ← p − lr·wd·p`, outside the moment estimates.
    Decoupled,
    /// `g ← g + wd·p` before the moment update.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub lr: f64,
    pub wd: f64,
    pub decay: DecayMode,
    /// Elementwise clamp applied after each step.
    pub clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: DenseMatrix,
    pub group: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Every trainable tensor with its group assignment and Adam moments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseMatrix, group: usize) -> usize {
        let len = value.len();
        self.params.push(Param {
            name: name.into(),
            value,
            group,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &DenseMatrix {
        &self.params[idx].value
    }

    pub fn set_value(&mut self, idx: usize, value: DenseMatrix) -> Result<()> {
        let p = &mut self.params[idx];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", format!("parameter `{}`", p.name)));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    groups: Vec<ParamGroup>,
    steps: u64,
}

impl Adam {
    pub fn new(groups: Vec<ParamGroup>) -> Self {
        Self { groups, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads[i]` belongs to parameter `i`, `None` means zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<DenseMatrix>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (p, g) in store.params.iter().zip(grads) {
            if p.group >= self.groups.len() {
                return Err(Error::invalid(format!(
                    "parameter `{}` refers to missing group {}",
                    p.name, p.group
                )));
            }
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adam", format!("gradient of `{}`", p.name)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (p, g) in store.params.iter_mut().zip(grads) {
            let group = self.groups[p.group];
            let values = p.value.data_mut();
            #[allow(clippy::needless_range_loop)]
            for i in 0..values.len() {
                let mut gi = g.as_ref().map_or(0.0, |g| g.data()[i]);
                if group.decay == DecayMode::L2 {
                    gi += group.wd * values[i];
                }
                p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * gi;
                p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * gi * gi;
                let update = (p.m[i] / c1) / ((p.v[i] / c2).sqrt() + EPS);
                if group.decay == DecayMode::Decoupled {
                    values[i] -= group.lr * group.wd * values[i];
                }
                values[i] -= group.lr * update;
                if let Some((lo, hi)) = group.clamp {
                    values[i] = values[i].clamp(lo, hi);
                }
            }
        }
        Ok(())
    }
}

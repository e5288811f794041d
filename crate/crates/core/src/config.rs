//! Experiment configuration as a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! [`ExperimentConfig::to_text`] writes every key in a fixed order, so a
//! written file parses back to an identical configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SbmSpec;
use crate::error::{Error, Result};
use crate::model::{ClassMask, ElementClass, ModelConfig, ModelKind, QuantMode, TrainConfig};
use crate::optim::DecayMode;
use crate::smp::{LambdaMode, SmpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtMode {
    Off,
    Bt,
    BtStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitProtocol {
    /// Seeded per-class sampling.
    Random,
    /// The split stored with the bundle.
    Bundle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Bundle directory, resolved against `QGNN_DATA_DIR` when relative and
    /// absent from the working directory.
    Dir(PathBuf),
    Sbm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    /// `None` for floating point.
    pub bits: Option<u8>,
    pub bt: BtMode,
    /// Source width truncated from when `bt` is on.
    pub bt_from: u8,
    pub bt_classes: ClassMask,
    pub layers: usize,
    pub hidden: usize,
    pub mu: f64,
    pub delta0: f64,
    pub eta_h: f64,
    pub eta_lambda: f64,
    pub eta_s: f64,
    pub lambda0: f64,
    pub slack0: f64,
    pub lambda_mode: LambdaMode,
    pub lr: f64,
    pub wd: f64,
    pub lr_gamma: f64,
    pub wd_gamma: f64,
    pub wd_mode: DecayMode,
    pub dropout: f64,
    pub gamma0: f64,
    pub epochs: usize,
    pub seed: u64,
    pub split: SplitProtocol,
    pub split_seed: u64,
    pub train_per_class: usize,
    pub val_size: usize,
    pub data: DataSource,
    pub sbm_blocks: usize,
    pub sbm_nodes: usize,
    pub sbm_p_in: f64,
    pub sbm_p_out: f64,
    pub sbm_features: usize,
    pub sbm_separation: f64,
    pub sbm_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let smp = SmpConfig::default();
        let train = TrainConfig::default();
        Self {
            model: ModelKind::Gcn,
            bits: None,
            bt: BtMode::Off,
            bt_from: 8,
            bt_classes: ClassMask::ALL,
            layers: 2,
            hidden: 64,
            mu: smp.mu,
            delta0: smp.delta0,
            eta_h: smp.eta_h,
            eta_lambda: smp.eta_lambda,
            eta_s: smp.eta_s,
            lambda0: smp.lambda0,
            slack0: smp.slack0,
            lambda_mode: smp.lambda_mode,
            lr: train.lr,
            wd: train.wd,
            lr_gamma: train.lr_gamma,
            wd_gamma: train.wd_gamma,
            wd_mode: train.decay,
            dropout: 0.5,
            gamma0: 1.0,
            epochs: train.epochs,
            seed: 0,
            split: SplitProtocol::Random,
            split_seed: 0,
            train_per_class: 20,
            val_size: 500,
            data: DataSource::Sbm,
            sbm_blocks: 4,
            sbm_nodes: 1000,
            sbm_p_in: 0.02,
            sbm_p_out: 0.002,
            sbm_features: 32,
            sbm_separation: 1.0,
            sbm_seed: 0,
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

fn num<T: FromStr>(field: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| field_err(field, format!("cannot parse `{value}`")))
}

fn flt(field: &str, value: &str) -> Result<f64> {
    let v: f64 = num(field, value)?;
    if !v.is_finite() {
        return Err(field_err(field, "must be finite"));
    }
    Ok(v)
}

fn class_list(mask: ClassMask) -> String {
    if mask == ClassMask::ALL {
        return "all".into();
    }
    ElementClass::ALL
        .iter()
        .filter(|c| mask.contains(**c))
        .map(|c| c.name())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Every key accepted by [`ExperimentConfig::set`], in file order.
    pub const KEYS: [&'static str; 37] = [
        "model",
        "bits",
        "bt",
        "bt_from",
        "bt_classes",
        "layers",
        "hidden",
        "mu",
        "delta0",
        "eta_h",
        "eta_lambda",
        "eta_s",
        "lambda0",
        "slack0",
        "lambda_mode",
        "lr",
        "wd",
        "lr_gamma",
        "wd_gamma",
        "wd_mode",
        "dropout",
        "gamma0",
        "epochs",
        "seed",
        "split",
        "split_seed",
        "train_per_class",
        "val_size",
        "data",
        "sbm_blocks",
        "sbm_nodes",
        "sbm_p_in",
        "sbm_p_out",
        "sbm_features",
        "sbm_separation",
        "sbm_seed",
        "format",
    ];

    /// Assigns one field from its text form. Dashes in `key` are read as
    /// underscores, so command-line spellings are accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "model" => self.model = value.parse().map_err(|_| field_err(k, "expected gcn or smp"))?,
            "bits" => {
                self.bits = match value {
                    "fp" | "32" => None,
                    "8" | "4" | "2" => Some(num(k, value)?),
                    _ => return Err(field_err(k, "expected fp, 8, 4 or 2")),
                }
            }
            "bt" => {
                self.bt = match value {
                    "off" => BtMode::Off,
                    "bt" => BtMode::Bt,
                    "bt-star" | "bt_star" => BtMode::BtStar,
                    _ => return Err(field_err(k, "expected off, bt or bt-star")),
                }
            }
            "bt_from" => self.bt_from = num(k, value)?,
            "bt_classes" => {
                self.bt_classes = if value == "all" {
                    ClassMask::ALL
                } else {
                    let classes = value
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<ElementClass>()
                                .map_err(|e| field_err(k, e.to_string()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ClassMask::from_classes(&classes)
                }
            }
            "layers" => self.layers = num(k, value)?,
            "hidden" => self.hidden = num(k, value)?,
            "mu" => self.mu = flt(k, value)?,
            "delta0" => self.delta0 = flt(k, value)?,
            "eta_h" => self.eta_h = flt(k, value)?,
            "eta_lambda" => self.eta_lambda = flt(k, value)?,
            "eta_s" => self.eta_s = flt(k, value)?,
            "lambda0" => self.lambda0 = flt(k, value)?,
            "slack0" => self.slack0 = flt(k, value)?,
            "lambda_mode" => {
                self.lambda_mode = match value {
                    "free" => LambdaMode::Free,
                    "nonneg" => LambdaMode::NonNegative,
                    _ => return Err(field_err(k, "expected free or nonneg")),
                }
            }
            "lr" => self.lr = flt(k, value)?,
            "wd" => self.wd = flt(k, value)?,
            "lr_gamma" => self.lr_gamma = flt(k, value)?,
            "wd_gamma" => self.wd_gamma = flt(k, value)?,
            "wd_mode" => {
                self.wd_mode = match value {
                    "decoupled" => DecayMode::Decoupled,
                    "l2" => DecayMode::L2,
                    _ => return Err(field_err(k, "expected decoupled or l2")),
                }
            }
            "dropout" => self.dropout = flt(k, value)?,
            "gamma0" => self.gamma0 = flt(k, value)?,
            "epochs" => self.epochs = num(k, value)?,
            "seed" => self.seed = num(k, value)?,
            "split" => {
                self.split = match value {
                    "random" => SplitProtocol::Random,
                    "bundle" => SplitProtocol::Bundle,
                    _ => return Err(field_err(k, "expected random or bundle")),
                }
            }
            "split_seed" => self.split_seed = num(k, value)?,
            "train_per_class" => self.train_per_class = num(k, value)?,
            "val_size" => self.val_size = num(k, value)?,
            "data" => {
                self.data = match value {
                    "" => return Err(field_err(k, "empty dataset")),
                    "sbm" => DataSource::Sbm,
                    path => DataSource::Dir(PathBuf::from(path)),
                }
            }
            "sbm_blocks" => self.sbm_blocks = num(k, value)?,
            "sbm_nodes" => self.sbm_nodes = num(k, value)?,
            "sbm_p_in" => self.sbm_p_in = flt(k, value)?,
            "sbm_p_out" => self.sbm_p_out = flt(k, value)?,
            "sbm_features" => self.sbm_features = num(k, value)?,
            "sbm_separation" => self.sbm_separation = flt(k, value)?,
            "sbm_seed" => self.sbm_seed = num(k, value)?,
            "format" => {
                if value != "1" {
                    return Err(field_err(k, format!("unsupported config format `{value}`")));
                }
            }
            _ => return Err(field_err(k, "unknown key")),
        }
        Ok(())
    }

    /// Parses and validates a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| field_err(&format!("line {}", i + 1), "expected `key = value`"))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// `(key, value)` pairs in [`ExperimentConfig::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let bits = self.bits.map_or("fp".to_string(), |b| b.to_string());
        let bt = match self.bt {
            BtMode::Off => "off",
            BtMode::Bt => "bt",
            BtMode::BtStar => "bt-star",
        };
        let lambda_mode = match self.lambda_mode {
            LambdaMode::Free => "free",
            LambdaMode::NonNegative => "nonneg",
        };
        let wd_mode = match self.wd_mode {
            DecayMode::Decoupled => "decoupled",
            DecayMode::L2 => "l2",
        };
        let split = match self.split {
            SplitProtocol::Random => "random",
            SplitProtocol::Bundle => "bundle",
        };
        let data = match &self.data {
            DataSource::Sbm => "sbm".to_string(),
            DataSource::Dir(p) => p.display().to_string(),
        };
        // `{:?}` prints the shortest representation that parses back exactly.
        let f = |v: f64| format!("{v:?}");
        let values = [
            self.model.to_string(),
            bits,
            bt.into(),
            self.bt_from.to_string(),
            class_list(self.bt_classes),
            self.layers.to_string(),
            self.hidden.to_string(),
            f(self.mu),
            f(self.delta0),
            f(self.eta_h),
            f(self.eta_lambda),
            f(self.eta_s),
            f(self.lambda0),
            f(self.slack0),
            lambda_mode.into(),
            f(self.lr),
            f(self.wd),
            f(self.lr_gamma),
            f(self.wd_gamma),
            wd_mode.into(),
            f(self.dropout),
            f(self.gamma0),
            self.epochs.to_string(),
            self.seed.to_string(),
            split.into(),
            self.split_seed.to_string(),
            self.train_per_class.to_string(),
            self.val_size.to_string(),
            data,
            self.sbm_blocks.to_string(),
            self.sbm_nodes.to_string(),
            f(self.sbm_p_in),
            f(self.sbm_p_out),
            self.sbm_features.to_string(),
            f(self.sbm_separation),
            self.sbm_seed.to_string(),
            "1".into(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn quant_mode(&self) -> Result<QuantMode> {
        let mode = match (self.bits, self.bt) {
            (None, BtMode::Off) => QuantMode::Fp,
            (None, _) => return Err(field_err("bt", "truncation needs a bit width")),
            (Some(bits), BtMode::Off) => QuantMode::Qat { bits },
            (Some(b2), bt) => QuantMode::QatBt {
                b1: self.bt_from,
                b2,
                skew_aware: bt == BtMode::BtStar,
                classes: self.bt_classes,
            },
        };
        mode.validate().map_err(|e| field_err("bits", e.to_string()))?;
        Ok(mode)
    }

    pub fn smp_config(&self) -> SmpConfig {
        SmpConfig {
            mu: self.mu,
            delta0: self.delta0,
            layers: self.layers,
            eta_h: self.eta_h,
            eta_lambda: self.eta_lambda,
            eta_s: self.eta_s,
            lambda0: self.lambda0,
            slack0: self.slack0,
            lambda_mode: self.lambda_mode,
        }
    }

    pub fn model_config(&self, in_dim: usize, classes: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            kind: self.model,
            in_dim,
            hidden: self.hidden,
            classes,
            layers: self.layers,
            dropout: self.dropout,
            mode: self.quant_mode()?,
            gamma0: self.gamma0,
            smp: self.smp_config(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            wd: self.wd,
            lr_gamma: self.lr_gamma,
            wd_gamma: self.wd_gamma,
            decay: self.wd_mode,
            seed: self.seed,
        }
    }

    pub fn sbm_spec(&self) -> SbmSpec {
        SbmSpec {
            seed: self.sbm_seed,
            blocks: self.sbm_blocks,
            n: self.sbm_nodes,
            p_in: self.sbm_p_in,
            p_out: self.sbm_p_out,
            feature_dim: self.sbm_features,
            separation: self.sbm_separation,
        }
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 {
                Ok(())
            } else {
                Err(field_err(field, "must be positive"))
            }
        };
        let non_negative = |field: &str, v: f64| {
            if v >= 0.0 {
                Ok(())
            } else {
                Err(field_err(field, "must be non-negative"))
            }
        };
        self.quant_mode()?;
        if self.hidden == 0 {
            return Err(field_err("hidden", "must be positive"));
        }
        if self.model == ModelKind::Gcn && self.layers == 0 {
            return Err(field_err("layers", "a GCN needs at least one layer"));
        }
        if self.layers > u16::MAX as usize {
            return Err(field_err("layers", "at most 65535"));
        }
        positive("lr", self.lr)?;
        non_negative("lr_gamma", self.lr_gamma)?;
        non_negative("wd", self.wd)?;
        non_negative("wd_gamma", self.wd_gamma)?;
        positive("gamma0", self.gamma0)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field_err("dropout", "must lie in [0, 1)"));
        }
        if self.model == ModelKind::Smp {
            self.smp_config()
                .validate()
                .map_err(|e| field_err("mu", e.to_string()))?;
        }
        if self.split == SplitProtocol::Random && self.train_per_class == 0 {
            return Err(field_err("train_per_class", "must be positive"));
        }
        if self.data == DataSource::Sbm {
            if self.sbm_blocks == 0 || self.sbm_nodes < self.sbm_blocks {
                return Err(field_err("sbm_nodes", "need at least one node per block"));
            }
            if !(0.0..=1.0).contains(&self.sbm_p_in) || !(0.0..=1.0).contains(&self.sbm_p_out) {
                return Err(field_err("sbm_p_in", "probabilities must lie in [0, 1]"));
            }
            if self.sbm_p_in <= self.sbm_p_out {
                return Err(field_err("sbm_p_out", "must be below sbm_p_in"));
            }
            if self.sbm_features == 0 {
                return Err(field_err("sbm_features", "must be positive"));
            }
            non_negative("sbm_separation", self.sbm_separation)?;
        }
        Ok(())
    }
}

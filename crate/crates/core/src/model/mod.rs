//! Trainable GCN and SMP models with fake-quantize hooks at every element
//! class: layer inputs, weights, messages, aggregation outputs and update
//! outputs.
//!
//! The same forward code serves training, evaluation and packed inference.
//! Inference swaps the weight hooks for pre-quantized constants and the
//! activation ranges for frozen ones.

mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::optim::ParamStore;
use crate::quant::{QuantConfig, Truncation};
use crate::smp::{self, SmpConfig, SmpState};
use crate::tape::{FakeQuantSpec, NodeId, QuantRecord, RangeSource, Tape};
use crate::truncation::TruncationSpec;

pub use train::{
    eval_pass, eval_pass_with, evaluate, train, EpochMetrics, EvalPass, HookStats, TrainConfig, TrainReport,
};

/// Parameter group of weights and biases.
pub const GROUP_MODEL: usize = 0;
/// Parameter group of the range scales `γ`.
pub const GROUP_GAMMA: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ElementClass {
    Input,
    Weight,
    Message,
    Aggregate,
    Update,
}

impl ElementClass {
    pub const ALL: [ElementClass; 5] = [
        ElementClass::Input,
        ElementClass::Weight,
        ElementClass::Message,
        ElementClass::Aggregate,
        ElementClass::Update,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Self::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown element class tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementClass::Input => "input",
            ElementClass::Weight => "weight",
            ElementClass::Message => "message",
            ElementClass::Aggregate => "aggregate",
            ElementClass::Update => "update",
        }
    }

    fn bit(self) -> u8 {
        1 << self.tag()
    }
}

impl fmt::Display for ElementClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown element class `{s}`")))
    }
}

/// Set of element classes, one bit per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMask(pub u8);

impl ClassMask {
    pub const ALL: ClassMask = ClassMask(0b1_1111);

    pub fn contains(self, class: ElementClass) -> bool {
        self.0 & class.bit() != 0
    }

    pub fn from_classes(classes: &[ElementClass]) -> Self {
        ClassMask(classes.iter().fold(0, |m, c| m | c.bit()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMode {
    Fp,
    Qat {
        bits: u8,
    },
    /// Quantize at `b1` bits, then truncate the classes in `classes` to `b2`.
    QatBt {
        b1: u8,
        b2: u8,
        skew_aware: bool,
        classes: ClassMask,
    },
}

impl QuantMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantMode::Fp => Ok(()),
            QuantMode::Qat { bits } => QuantConfig::new(bits).map(|_| ()),
            QuantMode::QatBt { b1, b2, .. } => TruncationSpec::new(b1, b2).map(|_| ()),
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, QuantMode::Fp)
    }

    /// Width of the quantizer that produces the codes.
    pub fn source_bits(&self) -> Option<u8> {
        match *self {
            QuantMode::Fp => None,
            QuantMode::Qat { bits } => Some(bits),
            QuantMode::QatBt { b1, .. } => Some(b1),
        }
    }

    /// Width of the stored codes of `class`.
    pub fn storage_bits(&self, class: ElementClass) -> Option<u8> {
        match *self {
            QuantMode::Fp => None,
            QuantMode::Qat { bits } => Some(bits),
            QuantMode::QatBt { b1, b2, classes, .. } => Some(if classes.contains(class) { b2 } else { b1 }),
        }
    }

    pub fn truncation(&self, class: ElementClass) -> Option<Truncation> {
        match *self {
            QuantMode::QatBt {
                b1,
                b2,
                skew_aware,
                classes,
            } if classes.contains(class) => Some(Truncation {
                spec: TruncationSpec::new(b1, b2).ok()?,
                skew_aware,
            }),
            _ => None,
        }
    }

    fn hook_spec(&self, class: ElementClass, range: RangeSource) -> Result<Option<FakeQuantSpec>> {
        match self.source_bits() {
            None => Ok(None),
            Some(bits) => Ok(Some(FakeQuantSpec {
                config: QuantConfig::new(bits)?,
                range,
                truncation: self.truncation(class),
            })),
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            QuantMode::Fp => f.write_str("fp"),
            QuantMode::Qat { bits } => write!(f, "int{bits}"),
            QuantMode::QatBt { b1, b2, skew_aware, .. } => {
                write!(f, "int{b2}-{b1}{}", if skew_aware { "-bt-star" } else { "-bt" })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Gcn,
    Smp,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Gcn => 0,
            ModelKind::Smp => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Gcn),
            1 => Ok(ModelKind::Smp),
            _ => Err(Error::Format(format!("unknown model kind {tag}"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Smp => "smp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ModelKind::Gcn),
            "smp" => Ok(ModelKind::Smp),
            _ => Err(Error::invalid(format!("unknown model `{s}`, expected gcn or smp"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// GCN layer count, or SMP propagation steps.
    pub layers: usize,
    pub dropout: f64,
    pub mode: QuantMode,
    pub gamma0: f64,
    pub smp: SmpConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |field: &str, msg: &str| Error::Config {
            field: field.into(),
            msg: msg.into(),
        };
        if self.in_dim == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(cfg("hidden", "dimensions must be positive"));
        }
        if self.kind == ModelKind::Gcn && self.layers == 0 {
            return Err(cfg("layers", "a GCN needs at least one layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(cfg("dropout", "must lie in [0, 1)"));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(cfg("gamma0", "must be positive"));
        }
        self.mode.validate()?;
        if self.kind == ModelKind::Smp {
            self.smp_config().validate()?;
        }
        Ok(())
    }

    /// Propagation settings with the step count taken from `layers`.
    pub fn smp_config(&self) -> SmpConfig {
        SmpConfig {
            layers: self.layers,
            ..self.smp
        }
    }

    /// `(fan_in, fan_out)` of every weight matrix.
    pub fn weight_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Gcn => (0..self.layers)
                .map(|l| {
                    let fan_in = if l == 0 { self.in_dim } else { self.hidden };
                    let fan_out = if l + 1 == self.layers {
                        self.classes
                    } else {
                        self.hidden
                    };
                    (fan_in, fan_out)
                })
                .collect(),
            ModelKind::Smp => vec![(self.in_dim, self.hidden), (self.hidden, self.classes)],
        }
    }

    /// Every `(class, layer)` hook the forward pass visits, in order.
    pub fn hooks(&self) -> Vec<(ElementClass, usize)> {
        use ElementClass::*;
        let mut out = Vec::new();
        let linears = self.weight_shapes().len();
        for l in 0..linears {
            out.extend([(Input, l), (Weight, l), (Message, l)]);
            match self.kind {
                ModelKind::Gcn => {
                    out.push((Aggregate, l));
                    if l + 1 < linears {
                        out.push((Update, l));
                    }
                }
                ModelKind::Smp => {
                    if l == 0 {
                        out.push((Update, l));
                    }
                }
            }
        }
        if self.kind == ModelKind::Smp {
            for step in 0..self.layers {
                out.extend([(Aggregate, linears + step), (Update, linears + step)]);
            }
        }
        out
    }
}

/// Frozen activation ranges keyed by hook.
pub type Calibration = BTreeMap<(ElementClass, usize), (f64, f64)>;

/// A weight tensor replaced by stored codes during inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeight {
    pub rows: usize,
    pub cols: usize,
    pub record: QuantRecord,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub training: bool,
    pub seed: u64,
    pub ranges: Option<&'a Calibration>,
    pub packed: Option<&'a BTreeMap<usize, PackedWeight>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HookNode {
    pub class: ElementClass,
    pub layer: usize,
    pub node: NodeId,
}

#[derive(Debug)]
pub struct Forward {
    pub logits: NodeId,
    /// Tape node of every parameter, aligned with the parameter store.
    pub params: Vec<NodeId>,
    pub hooks: Vec<HookNode>,
    /// Successive hidden representations (GCN) or propagation iterates
    /// (SMP, starting with the anchor).
    pub trajectory: Vec<NodeId>,
    pub smp_state: Option<SmpState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    linears: Vec<(usize, usize)>,
    #[serde(with = "pairs")]
    gammas: BTreeMap<(ElementClass, usize), usize>,
}

/// Tuple-keyed maps as entry lists, which every serde format accepts.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(m: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

impl Model {
    /// Glorot-uniform weights, zero biases, `γ = γ₀` for every hook.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut linears = Vec::new();
        for (l, (fan_in, fan_out)) in config.weight_shapes().into_iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
            let w = params.add(
                format!("layer{l}.weight"),
                DenseMatrix::new(fan_in, fan_out, data)?,
                GROUP_MODEL,
            );
            let b = params.add(format!("layer{l}.bias"), DenseMatrix::zeros(1, fan_out), GROUP_MODEL);
            linears.push((w, b));
        }
        let mut gammas = BTreeMap::new();
        if config.mode.is_quantized() {
            for (class, layer) in config.hooks() {
                let idx = params.add(
                    format!("gamma.{class}.{layer}"),
                    DenseMatrix::scalar(config.gamma0),
                    GROUP_GAMMA,
                );
                gammas.insert((class, layer), idx);
            }
        }
        Ok(Self {
            config,
            params,
            linears,
            gammas,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &DenseMatrix {
        self.params.value(self.linears[layer].0)
    }

    pub fn bias(&self, layer: usize) -> &DenseMatrix {
        self.params.value(self.linears[layer].1)
    }

    pub fn num_linears(&self) -> usize {
        self.linears.len()
    }

    pub fn set_weight(&mut self, layer: usize, value: DenseMatrix) -> Result<()> {
        self.params.set_value(self.linears[layer].0, value)
    }

    pub fn set_bias(&mut self, layer: usize, value: DenseMatrix) -> Result<()> {
        self.params.set_value(self.linears[layer].1, value)
    }

    pub fn gamma(&self, class: ElementClass, layer: usize) -> Option<f64> {
        self.gammas
            .get(&(class, layer))
            .map(|&i| self.params.value(i).get(0, 0))
    }

    pub fn set_gamma(&mut self, class: ElementClass, layer: usize, value: f64) -> Result<()> {
        let idx = *self
            .gammas
            .get(&(class, layer))
            .ok_or_else(|| Error::invalid(format!("no {class} hook at layer {layer}")))?;
        self.params.set_value(idx, DenseMatrix::scalar(value))
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, features: &DenseMatrix, opts: &ForwardOptions<'_>) -> Result<Forward> {
        if features.cols() != self.config.in_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} feature columns, model expects {}",
                    features.cols(),
                    self.config.in_dim
                ),
            ));
        }
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut ctx = Ctx {
            model: self,
            opts,
            params: &params,
            hooks: Vec::new(),
        };
        let x = tape.leaf(features.clone());
        let (logits, trajectory, smp_state) = match self.config.kind {
            ModelKind::Gcn => ctx.gcn(tape, x)?,
            ModelKind::Smp => ctx.smp(tape, x)?,
        };
        let hooks = ctx.hooks;
        Ok(Forward {
            logits,
            params,
            hooks,
            trajectory,
            smp_state,
        })
    }
}

struct Ctx<'m, 'o> {
    model: &'m Model,
    opts: &'o ForwardOptions<'o>,
    params: &'o [NodeId],
    hooks: Vec<HookNode>,
}

type Traced = (NodeId, Vec<NodeId>, Option<SmpState>);

impl Ctx<'_, '_> {
    fn hook(&mut self, tape: &mut Tape<'_>, x: NodeId, class: ElementClass, layer: usize) -> Result<NodeId> {
        let range = match self.opts.ranges {
            Some(r) if class != ElementClass::Weight => {
                let &(alpha, beta) = r
                    .get(&(class, layer))
                    .ok_or_else(|| Error::invalid(format!("no frozen range for {class} at layer {layer}")))?;
                RangeSource::Fixed { alpha, beta }
            }
            _ => RangeSource::Observe,
        };
        let out = match self.model.config.mode.hook_spec(class, range)? {
            None => x,
            Some(spec) => {
                let gamma = self.params[self.model.gammas[&(class, layer)]];
                tape.fake_quant(x, gamma, spec)?
            }
        };
        self.hooks.push(HookNode {
            class,
            layer,
            node: out,
        });
        Ok(out)
    }

    /// `hook(input)·hook(W) + b`, with the message hook applied.
    fn linear(&mut self, tape: &mut Tape<'_>, h: NodeId, layer: usize, bias_before_message: bool) -> Result<NodeId> {
        let (w_idx, b_idx) = self.model.linears[layer];
        let dropped = tape.dropout(h, self.model.config.dropout)?;
        let xq = self.hook(tape, dropped, ElementClass::Input, layer)?;
        let packed = self.opts.packed.and_then(|p| p.get(&layer));
        let m = match packed {
            Some(pw) => {
                let wq = tape.quantized(pw.rows, pw.cols, pw.record.clone())?;
                self.hooks.push(HookNode {
                    class: ElementClass::Weight,
                    layer,
                    node: wq,
                });
                tape.qmatmul(xq, wq)?
            }
            None => {
                let wq = self.hook(tape, self.params[w_idx], ElementClass::Weight, layer)?;
                if self.model.config.mode.is_quantized() {
                    tape.qmatmul(xq, wq)?
                } else {
                    tape.matmul(xq, wq)?
                }
            }
        };
        let m = if bias_before_message {
            tape.add_bias(m, self.params[b_idx])?
        } else {
            m
        };
        self.hook(tape, m, ElementClass::Message, layer)
    }

    fn gcn(&mut self, tape: &mut Tape<'_>, x: NodeId) -> Result<Traced> {
        let layers = self.model.linears.len();
        let mut h = x;
        let mut trajectory = Vec::new();
        for l in 0..layers {
            let m = self.linear(tape, h, l, false)?;
            let a = tape.spmm(m)?;
            let a = tape.add_bias(a, self.params[self.model.linears[l].1])?;
            let a = self.hook(tape, a, ElementClass::Aggregate, l)?;
            if l + 1 == layers {
                h = a;
            } else {
                let r = tape.relu(a);
                h = self.hook(tape, r, ElementClass::Update, l)?;
                trajectory.push(h);
            }
        }
        Ok((h, trajectory, None))
    }

    fn smp(&mut self, tape: &mut Tape<'_>, x: NodeId) -> Result<Traced> {
        let cfg = self.model.config.smp_config();
        let m = self.linear(tape, x, 0, true)?;
        let r = tape.relu(m);
        let hidden = self.hook(tape, r, ElementClass::Update, 0)?;
        let anchor = self.linear(tape, hidden, 1, true)?;
        let graph_nodes = tape.value(anchor).rows();
        let mut state = SmpState {
            lambda: cfg.lambda0,
            slack: cfg.slack0,
            delta: 0.0,
            trace: Vec::with_capacity(cfg.layers),
        };
        let mut h = anchor;
        let mut trajectory = vec![anchor];
        if cfg.layers > 0 {
            let g = tape_graph(tape, graph_nodes)?;
            state.delta = cfg.budget(g);
            let coef = cfg.coefficients();
            for step in 0..cfg.layers {
                let slot = 2 + step;
                let bar = tape.bdmm_mix(h, anchor, coef)?;
                let bar = self.hook(tape, bar, ElementClass::Aggregate, slot)?;
                let next = tape.bdmm_correct(bar, h, state.correction_gain(&cfg))?;
                let next = self.hook(tape, next, ElementClass::Update, slot)?;
                if !tape.value(next).is_finite() {
                    return Err(Error::Divergence(format!("propagation layer {}", step + 1)));
                }
                let s = smp::layer_smoothness(g, tape.value(next), tape.value(h))?;
                state.advance(s, &cfg)?;
                h = next;
                trajectory.push(h);
            }
        }
        Ok((h, trajectory, Some(state)))
    }
}

fn tape_graph<'g>(tape: &Tape<'g>, rows: usize) -> Result<&'g crate::graph::Graph> {
    let g = tape
        .graph()
        .ok_or_else(|| Error::invalid("propagation needs a tape bound to a graph"))?;
    if g.n() != rows {
        return Err(Error::shape("propagate", format!("{rows} rows for {} nodes", g.n())));
    }
    Ok(g)
}

/// Accuracy of row-wise argmax (lowest index wins ties) over `rows`.
pub fn accuracy(logits: &DenseMatrix, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::invalid("accuracy over an empty node set"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::shape("accuracy", "labels differ from logit rows"));
    }
    let pred = logits.argmax_rows();
    let hits = rows.iter().filter(|&&r| pred[r] == labels[r]).count();
    Ok(hits as f64 / rows.len() as f64)
}

#[cfg(test)]
mod tests;

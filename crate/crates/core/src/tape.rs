//! Reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the reverse of insertion
//! order is a valid reverse topological order. Fake-quantize nodes use the
//! straight-through estimator for their data input and the learnable-range
//! rule for their `γ` input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::{int_matmul, rescale_accumulators, DenseMatrix};
use crate::quant::{fake_quantize_full, observe_range, QuantConfig, QuantParams, Truncation};
use crate::smp::{self, MixCoefficients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a fake-quantize node obtains its range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeSource {
    /// Min/max of the incoming tensor.
    Observe,
    Fixed {
        alpha: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeQuantSpec {
    pub config: QuantConfig,
    pub range: RangeSource,
    pub truncation: Option<Truncation>,
}

/// Quantization state captured by a fake-quantize node during forward.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantRecord {
    pub params: QuantParams,
    pub config: QuantConfig,
    pub truncation: Option<Truncation>,
    pub scale: f64,
    pub zero: i32,
    pub shift: i32,
    pub codes: Vec<i32>,
    /// Pre-quantization tensor, kept for diagnostics.
    pub source: DenseMatrix,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    QMatMul(NodeId, NodeId),
    Spmm(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    FakeQuant {
        input: NodeId,
        gamma: NodeId,
        in_range: Vec<bool>,
        gamma_grad: Vec<f64>,
        record: Box<QuantRecord>,
    },
    Quantized(Box<QuantRecord>),
    CrossEntropy {
        logits: NodeId,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: DenseMatrix,
    },
    Sum {
        input: NodeId,
        weights: Option<DenseMatrix>,
    },
    BdmmMix {
        h: NodeId,
        x: NodeId,
        coef: MixCoefficients,
    },
    BdmmCorrect {
        bar: NodeId,
        prev: NodeId,
        gain: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

pub struct Tape<'g> {
    graph: Option<&'g Graph>,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    training: bool,
}

/// Gradients indexed by node; `None` where no gradient reached the node.
#[derive(Debug)]
pub struct Gradients(Vec<Option<DenseMatrix>>);

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.0.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseMatrix> {
        self.0.get_mut(id.0).and_then(Option::take)
    }
}

impl<'g> Tape<'g> {
    pub fn new(graph: Option<&'g Graph>, seed: u64, training: bool) -> Self {
        Self {
            graph,
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// The quantization record of a fake-quantize node.
    pub fn quant_record(&self, id: NodeId) -> Option<&QuantRecord> {
        match &self.nodes[id.0].op {
            Op::FakeQuant { record, .. } | Op::Quantized(record) => Some(record),
            _ => None,
        }
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn graph(&self) -> Option<&'g Graph> {
        self.graph
    }

    fn require_graph(&self, op: &'static str) -> Result<&'g Graph> {
        self.graph
            .ok_or_else(|| Error::invalid(format!("{op} needs a tape bound to a graph")))
    }

    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A constant tensor given directly by its codes; behaves like the
    /// output of a fake-quantize node in [`Tape::qmatmul`].
    pub fn quantized(&mut self, rows: usize, cols: usize, record: QuantRecord) -> Result<NodeId> {
        if record.codes.len() != rows * cols {
            return Err(Error::shape("quantized", "code count differs from shape"));
        }
        let data = record
            .codes
            .iter()
            .map(|&c| crate::quant::dequantize_code(c, record.scale, record.zero))
            .collect();
        let v = DenseMatrix::new(rows, cols, data)?;
        Ok(self.push(v, Op::Quantized(Box::new(record))))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Product of two fake-quantized tensors evaluated on their integer
    /// codes with one rescale per output element.
    pub fn qmatmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, rb) = match (self.quant_record(a), self.quant_record(b)) {
            (Some(ra), Some(rb)) => (ra, rb),
            _ => return Err(Error::invalid("integer matmul operands must be fake-quantize nodes")),
        };
        let (n, k) = self.value(a).shape();
        let (k2, m) = self.value(b).shape();
        if k != k2 {
            return Err(Error::shape("qmatmul", format!("{n}x{k} by {k2}x{m}")));
        }
        let acc = int_matmul(&ra.codes, n, k, ra.zero, &rb.codes, m, rb.zero);
        let v = rescale_accumulators(&acc, ra.scale * rb.scale, n, m);
        Ok(self.push(v, Op::QMatMul(a, b)))
    }

    pub fn spmm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.require_graph("spmm")?.spmm(self.value(a))?;
        Ok(self.push(v, Op::Spmm(a)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    /// Inverted dropout with drop probability `p`; the identity outside
    /// training or at `p = 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let len = self.value(a).len();
        let mask: Vec<f64> = (0..len)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = DenseMatrix::new(src.rows(), src.cols(), data)?;
        Ok(self.push(v, Op::Dropout { input: a, mask }))
    }

    /// Quantize then dequantize `input`; `gamma` must be a `1×1` node.
    pub fn fake_quant(&mut self, input: NodeId, gamma: NodeId, spec: FakeQuantSpec) -> Result<NodeId> {
        let g = self.value(gamma);
        if g.shape() != (1, 1) {
            return Err(Error::shape("fake_quant", "gamma must be 1x1"));
        }
        let gamma_value = g.get(0, 0);
        let src = self.value(input).clone();
        let (alpha, beta) = match spec.range {
            RangeSource::Observe => observe_range(src.data())?,
            RangeSource::Fixed { alpha, beta } => (alpha, beta),
        };
        let params = QuantParams::new(alpha, beta, gamma_value)?;
        let out = fake_quantize_full(src.data(), &params, &spec.config, spec.truncation.as_ref())?;
        let v = DenseMatrix::new(src.rows(), src.cols(), out.values)?;
        let record = QuantRecord {
            params,
            config: spec.config,
            truncation: spec.truncation,
            scale: out.scale,
            zero: out.zero,
            shift: out.shift,
            codes: out.codes,
            source: src,
        };
        Ok(self.push(
            v,
            Op::FakeQuant {
                input,
                gamma,
                in_range: out.in_range,
                gamma_grad: out.gamma_grad,
                record: Box::new(record),
            },
        ))
    }

    /// Mean softmax cross-entropy over `rows`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], rows: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), z.rows()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::invalid("cross-entropy over an empty node set"));
        }
        let c = z.cols();
        let mut probs = DenseMatrix::zeros(rows.len(), c);
        let mut targets = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            if r >= z.rows() || labels[r] >= c {
                return Err(Error::invalid(format!("row {r} or its label is out of range")));
            }
            let row = z.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, &v) in probs.row_mut(k).iter_mut().zip(row) {
                *p = (v - max).exp() / denom;
            }
            total += max + denom.ln() - row[labels[r]];
            targets.push(labels[r]);
        }
        let loss = total / rows.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            DenseMatrix::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseMatrix::scalar(self.value(a).sum());
        self.push(
            v,
            Op::Sum {
                input: a,
                weights: None,
            },
        )
    }

    /// `Σ w ⊙ a` for a constant `w`.
    pub fn weighted_sum(&mut self, a: NodeId, weights: DenseMatrix) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", "weights differ in shape"));
        }
        let v: f64 = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            DenseMatrix::scalar(v),
            Op::Sum {
                input: a,
                weights: Some(weights),
            },
        ))
    }

    /// `aH + bÃH + cX`
    pub fn bdmm_mix(&mut self, h: NodeId, x: NodeId, coef: MixCoefficients) -> Result<NodeId> {
        let v = smp::bdmm_mix(self.require_graph("bdmm_mix")?, self.value(h), self.value(x), coef)?;
        Ok(self.push(v, Op::BdmmMix { h, x, coef }))
    }

    /// `H̄ + k(I − Ã)(H̄ − H)`
    pub fn bdmm_correct(&mut self, bar: NodeId, prev: NodeId, gain: f64) -> Result<NodeId> {
        let v = smp::bdmm_correct(
            self.require_graph("bdmm_correct")?,
            self.value(bar),
            self.value(prev),
            gain,
        )?;
        Ok(self.push(v, Op::BdmmCorrect { bar, prev, gain }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn propagate(&self, id: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let mut send = |target: NodeId, delta: DenseMatrix| match &mut grads[target.0] {
            Some(acc) => acc.add_assign_unchecked(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Quantized(_) => {}
            Op::MatMul(a, b) | Op::QMatMul(a, b) => {
                send(*a, g.matmul_nt(self.value(*b))?);
                send(*b, self.value(*a).matmul_tn(g)?);
            }
            Op::Spmm(a) => send(*a, self.require_graph("spmm")?.spmm(g)?),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddBias(a, bias) => {
                send(*a, g.clone());
                send(*bias, g.column_sums());
            }
            Op::Scale(a, k) => send(*a, g.scale(*k)),
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Dropout { input, mask } => {
                let data = g.data().iter().zip(mask).map(|(a, b)| a * b).collect();
                send(*input, DenseMatrix::from_raw(g.rows(), g.cols(), data));
            }
            Op::FakeQuant {
                input,
                gamma,
                in_range,
                gamma_grad,
                ..
            } => {
                let data = g
                    .data()
                    .iter()
                    .zip(in_range)
                    .map(|(&gv, &ok)| if ok { gv } else { 0.0 })
                    .collect();
                send(*input, DenseMatrix::from_raw(g.rows(), g.cols(), data));
                let dg: f64 = g.data().iter().zip(gamma_grad).map(|(a, b)| a * b).sum();
                send(*gamma, DenseMatrix::scalar(dg));
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let z = self.value(*logits);
                let upstream = g.get(0, 0) / rows.len() as f64;
                let mut d = DenseMatrix::zeros(z.rows(), z.cols());
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let out = d.row_mut(r);
                    for (o, &p) in out.iter_mut().zip(probs.row(k)) {
                        *o += upstream * p;
                    }
                    out[t] -= upstream;
                }
                send(*logits, d);
            }
            Op::Sum { input, weights } => {
                let x = self.value(*input);
                let s = g.get(0, 0);
                let d = match weights {
                    Some(w) => w.scale(s),
                    None => DenseMatrix::filled(x.rows(), x.cols(), s),
                };
                send(*input, d);
            }
            Op::BdmmMix { h, x, coef } => {
                let ag = self.require_graph("bdmm_mix")?.spmm(g)?;
                let dh = g.scale(coef.a).add(&ag.scale(coef.b))?;
                send(*h, dh);
                send(*x, g.scale(coef.c));
            }
            Op::BdmmCorrect { bar, prev, gain } => {
                let ag = self.require_graph("bdmm_correct")?.spmm(g)?;
                let gd = g.sub(&ag)?.scale(*gain);
                send(*bar, g.add(&gd)?);
                send(*prev, gd.scale(-1.0));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::truncation::TruncationSpec;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn q8_observe() -> FakeQuantSpec {
        FakeQuantSpec {
            config: QuantConfig::new(8).unwrap(),
            range: RangeSource::Observe,
            truncation: None,
        }
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new(None, 0, true);
        let x = t.leaf(m(&[&[-1.0, 2.0]]));
        let y = t.relu(x);
        assert_eq!(t.value(y), &m(&[&[0.0, 2.0]]));
    }

    #[test]
    fn identity_matmul_forward() {
        let mut t = Tape::new(None, 0, true);
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let i = t.leaf(DenseMatrix::identity(2));
        let xi = t.leaf(x.clone());
        let y = t.matmul(i, xi).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn zero_dropout_is_identity() {
        let mut t = Tape::new(None, 5, true);
        let x = t.leaf(m(&[&[1.0, 2.0]]));
        assert_eq!(t.dropout(x, 0.0).unwrap(), x);
        assert!(t.dropout(x, 1.0).is_err());
    }

    #[test]
    fn dropout_keeps_expectation_scale() {
        let mut t = Tape::new(None, 5, true);
        let x = t.leaf(DenseMatrix::filled(100, 100, 1.0));
        let y = t.dropout(x, 0.5).unwrap();
        for &v in t.value(y).data() {
            assert!(v == 0.0 || v == 2.0);
        }
        let mean = t.value(y).sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05);
        let mut eval = Tape::new(None, 5, false);
        let x = eval.leaf(DenseMatrix::filled(2, 2, 1.0));
        assert_eq!(eval.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new(None, 0, true);
        let a = t.leaf(DenseMatrix::zeros(2, 3));
        let b = t.leaf(DenseMatrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        assert!(t.spmm(a).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut t = Tape::new(None, 0, true);
        let x = t.leaf(m(&[&[1.0, -2.0]]));
        let y = t.scale(x, 3.0);
        let z = t.add(x, y).unwrap();
        let s = t.sum(z);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[&[4.0, 4.0]]));
    }

    #[test]
    fn sum_of_product_gradient() {
        let mut t = Tape::new(None, 0, true);
        let w = t.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let x = t.leaf(m(&[&[0.5], &[-1.5]]));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &m(&[&[0.5, -1.5], &[0.5, -1.5]]));
    }

    #[test]
    fn fake_quant_in_range_passes_gradient() {
        let mut t = Tape::new(None, 0, true);
        let x = t.leaf(m(&[&[0.1, 0.7, -0.2]]));
        let gamma = t.leaf(DenseMatrix::scalar(1.0));
        let q = t.fake_quant(x, gamma, q8_observe()).unwrap();
        let w = m(&[&[1.5, -2.0, 0.25]]);
        let s = t.weighted_sum(q, w.clone()).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &w);
    }

    #[test]
    fn fake_quant_clipped_high_blocks_gradient() {
        let mut t = Tape::new(None, 0, true);
        let x = t.leaf(m(&[&[0.0, 0.5, 9.0]]));
        let gamma = t.leaf(DenseMatrix::scalar(1.0));
        let spec = FakeQuantSpec {
            range: RangeSource::Fixed { alpha: 0.0, beta: 1.0 },
            ..q8_observe()
        };
        let q = t.fake_quant(x, gamma, spec).unwrap();
        let s = t.sum(q);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[&[1.0, 1.0, 0.0]]));
        let dg = g.get(gamma).unwrap().get(0, 0);
        let s_step = 1.0 / 255.0;
        let interior = s_step * (0.5f64 / s_step).round() - 0.5;
        assert!((dg - (0.0 + interior + 255.0)).abs() < 1e-12);
    }

    #[test]
    fn qmatmul_equals_dequantized_product() {
        let mut t = Tape::new(None, 0, true);
        let a = t.leaf(m(&[&[0.3, -1.2, 2.0], &[0.0, 0.9, -0.4]]));
        let b = t.leaf(m(&[&[1.0, -0.5], &[0.25, 0.75], &[-1.5, 2.5]]));
        let gamma = t.leaf(DenseMatrix::scalar(0.9));
        let qa = t.fake_quant(a, gamma, q8_observe()).unwrap();
        let qb = t.fake_quant(b, gamma, q8_observe()).unwrap();
        let y = t.qmatmul(qa, qb).unwrap();
        let want = t.value(qa).matmul(t.value(qb)).unwrap();
        assert!(t.value(y).max_abs_diff(&want) < 1e-12);
        assert!(t.qmatmul(a, qb).is_err());
    }

    #[test]
    fn truncation_width_must_match() {
        let mut t = Tape::new(None, 0, true);
        let a = t.leaf(m(&[&[0.3, -1.2]]));
        let gamma = t.leaf(DenseMatrix::scalar(1.0));
        let spec = FakeQuantSpec {
            config: QuantConfig::new(4).unwrap(),
            range: RangeSource::Observe,
            truncation: Some(Truncation {
                spec: TruncationSpec::new(8, 2).unwrap(),
                skew_aware: false,
            }),
        };
        assert!(t.fake_quant(a, gamma, spec).is_err());
    }

    #[test]
    fn cross_entropy_ignores_unlisted_rows() {
        let logits = m(&[&[1.0, 0.0], &[0.0, 3.0], &[2.0, 2.0]]);
        let loss = |labels: &[usize]| {
            let mut t = Tape::new(None, 0, true);
            let z = t.leaf(logits.clone());
            let l = t.cross_entropy(z, labels, &[0, 2]).unwrap();
            t.value(l).get(0, 0)
        };
        assert_eq!(loss(&[0, 0, 1]), loss(&[0, 1, 1]));
        let want = ((1.0f64.exp() + 1.0).ln() - 1.0 + 2.0f64.ln()) / 2.0;
        assert!((loss(&[0, 1, 1]) - want).abs() < 1e-12);
    }
}

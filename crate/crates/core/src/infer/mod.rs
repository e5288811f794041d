//! Quantized model files and packed-integer inference.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "QGNN" | version u16 | kind u8 | bits u8 | flags u8 | b2 u8 | bt classes u8
//! layers u16 | in_dim u32 | hidden u32 | classes u32
//! dropout f64 | gamma0 f64 | mu, delta0, eta_h, eta_lambda, eta_s, lambda0, slack0 f64
//! lambda mode u8
//! metadata count u32, then (key len u16, key, value len u32, value)*
//! bias count u32, then (len u32, f64*)*
//! block count u32, then blocks
//! block: class u8 | layer u16 | storage bits u8 | alpha, beta, gamma, scale f64
//!        zero i32 | rows u32 | cols u32 | payload len u32 | payload
//! ```
//!
//! `bits` is 32 for floating-point files, whose weight payloads are `f32`.
//! Flag bit 0 marks truncation and bit 1 skew-aware truncation. Weight
//! blocks carry packed codes; activation blocks carry the frozen range and
//! an empty payload. Truncated weight codes are stored as `b₂`-level
//! indices and widened back to the `b₁` grid on load.

mod bench;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::matrix::DenseMatrix;
use crate::model::{
    Calibration, ClassMask, ElementClass, ForwardOptions, Model, ModelConfig, ModelKind, PackedWeight, QuantMode,
};
use crate::quant::pack::PackedTensor;
use crate::quant::{fake_quantize_full, observe_range, QuantConfig, QuantParams};
use crate::smp::{LambdaMode, SmpConfig};
use crate::tape::{QuantRecord, Tape};

pub use bench::{benchmark, BenchConfig, BenchReport};

pub const MAGIC: &[u8; 4] = b"QGNN";
pub const VERSION: u16 = 1;
/// `bits` header value of floating-point files.
pub const FP_BITS: u8 = 32;

const FLAG_BT: u8 = 1;
const FLAG_SKEW: u8 = 2;

/// A model ready for inference: packed weights, frozen activation ranges
/// and free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    model: Model,
    calibration: Calibration,
    weights: BTreeMap<usize, PackedWeight>,
    metadata: Vec<(String, String)>,
}

/// Output of [`QuantizedModel::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: DenseMatrix,
    pub predictions: Vec<usize>,
}

impl QuantizedModel {
    /// Freezes `model` with the activation ranges in `calibration`.
    pub fn from_trained(model: &Model, calibration: &Calibration, metadata: Vec<(String, String)>) -> Result<Self> {
        let cfg = model.config();
        let mut frozen = Calibration::new();
        let mut weights = BTreeMap::new();
        if cfg.mode.is_quantized() {
            for (class, layer) in cfg.hooks() {
                if class == ElementClass::Weight {
                    weights.insert(layer, weight_record(model, layer)?);
                    continue;
                }
                let range = calibration.get(&(class, layer)).ok_or_else(|| {
                    Error::invalid(format!("unfrozen range: no calibration for {class} at layer {layer}"))
                })?;
                frozen.insert((class, layer), *range);
            }
        }
        let mut model = model.clone();
        if !cfg.mode.is_quantized() {
            for l in 0..model.num_linears() {
                let w = model.weight(l).map(|v| v as f32 as f64);
                model.set_weight(l, w)?;
            }
        }
        for (l, pw) in &weights {
            model.set_weight(*l, dequantized(pw)?)?;
        }
        for (key, value) in &metadata {
            if key.len() > u16::MAX as usize || key.contains('\n') || value.contains('\n') {
                return Err(Error::invalid(format!("metadata entry `{key}` is not a single line")));
            }
        }
        Ok(Self {
            model,
            calibration: frozen,
            weights,
            metadata,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn metadata(&self) -> &[(String, String)] {
        &self.metadata
    }

    /// `32` for floating-point models, otherwise the quantizer width.
    pub fn bits(&self) -> u8 {
        self.config().mode.source_bits().unwrap_or(FP_BITS)
    }

    /// Bytes held by weight payloads and biases.
    pub fn weight_bytes(&self) -> usize {
        let weights: usize = (0..self.model.num_linears())
            .map(|l| match self.weights.get(&l) {
                Some(pw) => crate::quant::pack::row_bytes(pw.cols, self.weight_storage_bits()) * pw.rows,
                None => self.model.weight(l).len() * 4,
            })
            .sum();
        let biases: usize = (0..self.model.num_linears())
            .map(|l| self.model.bias(l).len() * 8)
            .sum();
        weights + biases
    }

    fn weight_storage_bits(&self) -> u8 {
        self.config().mode.storage_bits(ElementClass::Weight).unwrap_or(FP_BITS)
    }

    /// Forward pass with integer weight matmuls and frozen activation ranges.
    pub fn infer(&self, g: &Graph, features: &DenseMatrix) -> Result<Inference> {
        if features.rows() != g.n() {
            return Err(Error::shape(
                "infer",
                format!("{} feature rows for {} nodes", features.rows(), g.n()),
            ));
        }
        let mut tape = Tape::new(Some(g), 0, false);
        let quantized = self.config().mode.is_quantized();
        let opts = ForwardOptions {
            training: false,
            seed: 0,
            ranges: quantized.then_some(&self.calibration),
            packed: quantized.then_some(&self.weights),
        };
        let fwd = self.model.forward(&mut tape, features, &opts)?;
        let logits = tape.value(fwd.logits).clone();
        let predictions = logits.argmax_rows();
        Ok(Inference { logits, predictions })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = self.config();
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(cfg.kind.tag());
        w.u8(self.bits());
        let (flags, b2, mask) = match cfg.mode {
            QuantMode::QatBt {
                b2,
                skew_aware,
                classes,
                ..
            } => (FLAG_BT | if skew_aware { FLAG_SKEW } else { 0 }, b2, classes.0),
            _ => (0, 0, 0),
        };
        w.u8(flags);
        w.u8(b2);
        w.u8(mask);
        w.u16(u16::try_from(cfg.layers).map_err(|_| Error::invalid("too many layers for the file format"))?);
        for d in [cfg.in_dim, cfg.hidden, cfg.classes] {
            w.u32(dim32(d)?);
        }
        let s = &cfg.smp;
        for v in [
            cfg.dropout,
            cfg.gamma0,
            s.mu,
            s.delta0,
            s.eta_h,
            s.eta_lambda,
            s.eta_s,
            s.lambda0,
            s.slack0,
        ] {
            w.f64(v);
        }
        w.u8(match s.lambda_mode {
            LambdaMode::Free => 0,
            LambdaMode::NonNegative => 1,
        });

        w.u32(dim32(self.metadata.len())?);
        for (k, v) in &self.metadata {
            w.u16(k.len() as u16);
            w.bytes(k.as_bytes());
            w.u32(dim32(v.len())?);
            w.bytes(v.as_bytes());
        }

        let linears = self.model.num_linears();
        w.u32(dim32(linears)?);
        for l in 0..linears {
            let b = self.model.bias(l);
            w.u32(dim32(b.len())?);
            for &v in b.data() {
                w.f64(v);
            }
        }

        let blocks = self.blocks()?;
        w.u32(dim32(blocks.len())?);
        for b in &blocks {
            w.u8(b.class.tag());
            w.u16(b.layer as u16);
            w.u8(b.bits);
            for v in [b.alpha, b.beta, b.gamma, b.scale] {
                w.f64(v);
            }
            w.i32(b.zero);
            w.u32(dim32(b.rows)?);
            w.u32(dim32(b.cols)?);
            w.u32(dim32(b.payload.len())?);
            w.bytes(&b.payload);
        }
        Ok(w.0)
    }

    fn blocks(&self) -> Result<Vec<Block>> {
        let cfg = self.config();
        let mut out = Vec::new();
        if !cfg.mode.is_quantized() {
            for l in 0..self.model.num_linears() {
                let wm = self.model.weight(l);
                out.push(Block {
                    class: ElementClass::Weight,
                    layer: l,
                    bits: FP_BITS,
                    alpha: 0.0,
                    beta: 0.0,
                    gamma: 0.0,
                    scale: 0.0,
                    zero: 0,
                    rows: wm.rows(),
                    cols: wm.cols(),
                    payload: wm.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
                });
            }
            return Ok(out);
        }
        for (class, layer) in cfg.hooks() {
            if class == ElementClass::Weight {
                let pw = &self.weights[&layer];
                let bits = self.weight_storage_bits();
                let step = storage_step(&cfg.mode, class);
                let codes: Vec<i32> = pw.record.codes.iter().map(|&c| c / step).collect();
                let packed = PackedTensor::pack(&codes, pw.rows, pw.cols, bits, pw.record.scale, pw.record.zero)?;
                let p = &pw.record.params;
                out.push(Block {
                    class,
                    layer,
                    bits,
                    alpha: p.alpha,
                    beta: p.beta,
                    gamma: p.gamma,
                    scale: pw.record.scale,
                    zero: pw.record.zero,
                    rows: pw.rows,
                    cols: pw.cols,
                    payload: packed.payload,
                });
            } else {
                let (alpha, beta) = self.calibration[&(class, layer)];
                let gamma = self
                    .model
                    .gamma(class, layer)
                    .ok_or_else(|| Error::invalid(format!("no range scale for {class} at layer {layer}")))?;
                let qc = QuantConfig::new(cfg.mode.source_bits().unwrap_or(8))?;
                let qp = QuantParams::new(alpha, beta, gamma)?;
                out.push(Block {
                    class,
                    layer,
                    bits: cfg.mode.storage_bits(class).unwrap_or(FP_BITS),
                    alpha,
                    beta,
                    gamma,
                    scale: qp.scale(&qc),
                    zero: qp.zero_point(&qc),
                    rows: 0,
                    cols: 0,
                    payload: Vec::new(),
                });
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a model file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::from_tag(r.u8()?)?;
        let bits = r.u8()?;
        let flags = r.u8()?;
        let b2 = r.u8()?;
        let mask = r.u8()?;
        let layers = r.u16()? as usize;
        let in_dim = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let dropout = r.f64()?;
        let gamma0 = r.f64()?;
        let mut smp_vals = [0.0; 7];
        for v in &mut smp_vals {
            *v = r.f64()?;
        }
        let lambda_mode = match r.u8()? {
            0 => LambdaMode::Free,
            1 => LambdaMode::NonNegative,
            t => return Err(Error::Format(format!("unknown multiplier mode {t}"))),
        };
        if flags & !(FLAG_BT | FLAG_SKEW) != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        let mode = match (bits, flags & FLAG_BT != 0) {
            (FP_BITS, false) => QuantMode::Fp,
            (b, false) => QuantMode::Qat { bits: b },
            (b1, true) => QuantMode::QatBt {
                b1,
                b2,
                skew_aware: flags & FLAG_SKEW != 0,
                classes: ClassMask(mask),
            },
        };
        let [mu, delta0, eta_h, eta_lambda, eta_s, lambda0, slack0] = smp_vals;
        let config = ModelConfig {
            kind,
            in_dim,
            hidden,
            classes,
            layers,
            dropout,
            mode,
            gamma0,
            smp: SmpConfig {
                mu,
                delta0,
                layers,
                eta_h,
                eta_lambda,
                eta_s,
                lambda0,
                slack0,
                lambda_mode,
            },
        };
        let mut model = Model::new(config, 0).map_err(|e| Error::Format(format!("header: {e}")))?;

        let count = r.u32()? as usize;
        let mut metadata = Vec::new();
        for _ in 0..count {
            let klen = r.u16()? as usize;
            let key = r.string(klen)?;
            let vlen = r.u32()? as usize;
            metadata.push((key, r.string(vlen)?));
        }

        let linears = r.u32()? as usize;
        if linears != model.num_linears() {
            return Err(Error::Format(format!(
                "{linears} bias vectors, expected {}",
                model.num_linears()
            )));
        }
        for l in 0..linears {
            let len = r.u32()? as usize;
            let want = model.bias(l).len();
            if len != want {
                return Err(Error::Format(format!("bias {l} has {len} entries, expected {want}")));
            }
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            model.set_bias(l, DenseMatrix::new(1, len, data)?)?;
        }

        let nblocks = r.u32()? as usize;
        let mut calibration = Calibration::new();
        let mut weights = BTreeMap::new();
        let shapes = config.weight_shapes();
        let expected: Vec<(ElementClass, usize)> = if mode.is_quantized() {
            config.hooks()
        } else {
            (0..shapes.len()).map(|l| (ElementClass::Weight, l)).collect()
        };
        if nblocks != expected.len() {
            return Err(Error::Format(format!(
                "{nblocks} tensor blocks, expected {}",
                expected.len()
            )));
        }
        for &(class, layer) in &expected {
            let got_class = ElementClass::from_tag(r.u8()?)?;
            let got_layer = r.u16()? as usize;
            if (got_class, got_layer) != (class, layer) {
                return Err(Error::Format(format!(
                    "block {got_class}@{got_layer} where {class}@{layer} was expected"
                )));
            }
            let sbits = r.u8()?;
            let (alpha, beta, gamma, scale) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let zero = r.i32()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let plen = r.u32()? as usize;
            let want_bits = mode.storage_bits(class).unwrap_or(FP_BITS);
            if sbits != want_bits {
                return Err(Error::Format(format!(
                    "{class}@{layer} stored at {sbits} bits, expected {want_bits}"
                )));
            }
            let declared = if class == ElementClass::Weight {
                if (rows, cols) != shapes[layer] {
                    return Err(Error::Format(format!(
                        "weight {layer} is {rows}x{cols}, expected {:?}",
                        shapes[layer]
                    )));
                }
                if sbits == FP_BITS {
                    rows * cols * 4
                } else {
                    crate::quant::pack::row_bytes(cols, sbits) * rows
                }
            } else {
                0
            };
            if plen != declared {
                return Err(Error::Format(format!(
                    "{class}@{layer} declares {plen} payload bytes, shape implies {declared}"
                )));
            }
            let payload = r.take(plen)?;
            if class == ElementClass::Weight && !mode.is_quantized() {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                model.set_weight(layer, DenseMatrix::new(rows, cols, data)?)?;
                continue;
            }
            let qc = QuantConfig::new(mode.source_bits().unwrap_or(8))?;
            let params =
                QuantParams::new(alpha, beta, gamma).map_err(|e| Error::Format(format!("{class}@{layer}: {e}")))?;
            model.set_gamma(class, layer, gamma)?;
            if class != ElementClass::Weight {
                calibration.insert((class, layer), (alpha, beta));
                continue;
            }
            let packed = PackedTensor {
                bits: sbits,
                rows,
                cols,
                payload: payload.to_vec(),
                scale,
                zero,
            };
            let step = storage_step(&mode, class);
            let codes = packed.unpack().into_iter().map(|c| c * step).collect();
            let pw = PackedWeight {
                rows,
                cols,
                record: QuantRecord {
                    params,
                    config: qc,
                    truncation: mode.truncation(class),
                    scale,
                    zero,
                    shift: 0,
                    codes,
                    source: DenseMatrix::zeros(0, 0),
                },
            };
            model.set_weight(layer, dequantized(&pw)?)?;
            weights.insert(layer, pw);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            model,
            calibration,
            weights,
            metadata,
        })
    }

    /// Writes the file and returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }
}

struct Block {
    class: ElementClass,
    layer: usize,
    bits: u8,
    alpha: f64,
    beta: f64,
    gamma: f64,
    scale: f64,
    zero: i32,
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
}

/// Distance between stored codes on the source grid.
fn storage_step(mode: &QuantMode, class: ElementClass) -> i32 {
    mode.truncation(class).map_or(1, |t| t.spec.s0())
}

/// The weight hook of `layer` evaluated exactly as the training forward does.
fn weight_record(model: &Model, layer: usize) -> Result<PackedWeight> {
    let cfg = model.config();
    let w = model.weight(layer);
    let qc = QuantConfig::new(cfg.mode.source_bits().unwrap_or(8))?;
    let (alpha, beta) = observe_range(w.data())?;
    let gamma = model
        .gamma(ElementClass::Weight, layer)
        .ok_or_else(|| Error::invalid(format!("no weight range scale at layer {layer}")))?;
    let params = QuantParams::new(alpha, beta, gamma)?;
    let truncation = cfg.mode.truncation(ElementClass::Weight);
    let out = fake_quantize_full(w.data(), &params, &qc, truncation.as_ref())?;
    Ok(PackedWeight {
        rows: w.rows(),
        cols: w.cols(),
        record: QuantRecord {
            params,
            config: qc,
            truncation,
            scale: out.scale,
            zero: out.zero,
            shift: 0,
            codes: out.codes,
            source: DenseMatrix::zeros(0, 0),
        },
    })
}

fn dequantized(pw: &PackedWeight) -> Result<DenseMatrix> {
    let data = pw
        .record
        .codes
        .iter()
        .map(|&c| pw.record.scale * (c as i64 - pw.record.zero as i64) as f64)
        .collect();
    DenseMatrix::new(pw.rows, pw.cols, data)
}

fn dim32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{v} exceeds the 32-bit file field")))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("metadata is not UTF-8".into()))
    }
}

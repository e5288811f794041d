//! C interface for loading packed models and running inference.
//!
//! Handles are opaque and owned by the caller; every `*_new`/`*_load` has a
//! matching `*_free`. Fallible calls return a [`QgnnStatus`] and leave a
//! message for [`qgnn_last_error`] on the calling thread. Panics never cross
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qgnn::infer::QuantizedModel;
use qgnn::model::ModelKind;
use qgnn::{DenseMatrix, Error, Graph};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QgnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Graph = 8,
    Internal = 9,
    Panic = 10,
}

impl QgnnStatus {
    fn of(e: &Error) -> Self {
        match e {
            Error::EmptyGraph | Error::NodeOutOfRange { .. } => QgnnStatus::Graph,
            Error::Shape { .. } => QgnnStatus::Shape,
            Error::NonFinite(_) | Error::Divergence(_) => QgnnStatus::NonFinite,
            Error::InvalidArgument(_) | Error::Config { .. } => QgnnStatus::InvalidArgument,
            Error::Format(_) | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => QgnnStatus::Format,
            Error::Io(_) => QgnnStatus::Io,
            Error::Degenerate(_) | Error::CodeOutOfRange { .. } => QgnnStatus::Internal,
        }
    }
}

/// Opaque graph handle.
pub struct QgnnGraph(Graph);

/// Opaque model handle.
pub struct QgnnModel(QuantizedModel);

/// Shape and precision of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QgnnModelInfo {
    /// 0 for GCN, 1 for SMP.
    pub kind: u32,
    /// 32 for floating point, otherwise 2, 4 or 8.
    pub bits: u32,
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub layers: usize,
    pub weight_bytes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: QgnnStatus, msg: impl Into<String>) -> QgnnStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), (QgnnStatus, String)>) -> QgnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QgnnStatus::Ok,
        Ok(Err((s, msg))) => fail(s, msg),
        Err(_) => fail(QgnnStatus::Panic, "internal panic"),
    }
}

fn lift(e: Error) -> (QgnnStatus, String) {
    (QgnnStatus::of(&e), format!("{}: {e}", e.code()))
}

fn null(what: &str) -> (QgnnStatus, String) {
    (QgnnStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qgnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn qgnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a graph on `num_nodes` nodes from `num_edges` undirected edges
/// `(src[i], dst[i])`. Self-loops and duplicates are dropped.
///
/// # Safety
/// `src` and `dst` must point to `num_edges` readable values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn qgnn_graph_new(
    num_nodes: usize,
    src: *const u32,
    dst: *const u32,
    num_edges: usize,
    out: *mut *mut QgnnGraph,
) -> QgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if num_edges > 0 && (src.is_null() || dst.is_null()) {
            return Err(null("edge array"));
        }
        let (s, d) = if num_edges == 0 {
            (&[][..], &[][..])
        } else {
            // SAFETY: non-null and sized by the caller.
            unsafe {
                (
                    std::slice::from_raw_parts(src, num_edges),
                    std::slice::from_raw_parts(dst, num_edges),
                )
            }
        };
        let edges: Vec<(usize, usize)> = s.iter().zip(d).map(|(&a, &b)| (a as usize, b as usize)).collect();
        let g = Graph::build(&edges, num_nodes).map_err(lift)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(QgnnGraph(g))) };
        Ok(())
    })
}

/// Node count of a graph, 0 for null.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qgnn_graph_num_nodes(graph: *const QgnnGraph) -> usize {
    // SAFETY: caller contract.
    unsafe { graph.as_ref() }.map_or(0, |g| g.0.n())
}

/// # Safety
/// `graph` must be null or a handle from [`qgnn_graph_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qgnn_graph_free(graph: *mut QgnnGraph) {
    if !graph.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(graph) });
    }
}

fn boxed_model(m: QuantizedModel, out: *mut *mut QgnnModel) {
    // SAFETY: callers check `out` first.
    unsafe { *out = Box::into_raw(Box::new(QgnnModel(m))) };
}

/// Loads a packed model file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qgnn_model_load(path: *const c_char, out: *mut *mut QgnnModel) -> QgnnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller contract.
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (QgnnStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        boxed_model(QuantizedModel::load(Path::new(p)).map_err(lift)?, out);
        Ok(())
    })
}

/// Loads a packed model from `len` bytes in memory.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qgnn_model_load_bytes(data: *const u8, len: usize, out: *mut *mut QgnnModel) -> QgnnStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: caller contract.
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        boxed_model(QuantizedModel::from_bytes(bytes).map_err(lift)?, out);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from a load call not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qgnn_model_free(model: *mut QgnnModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the caller.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn qgnn_model_info(model: *const QgnnModel, info: *mut QgnnModelInfo) -> QgnnStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if info.is_null() {
            return Err(null("info"));
        }
        let c = m.0.config();
        let v = QgnnModelInfo {
            kind: match c.kind {
                ModelKind::Gcn => 0,
                ModelKind::Smp => 1,
            },
            bits: u32::from(m.0.bits()),
            in_dim: c.in_dim,
            hidden: c.hidden,
            classes: c.classes,
            layers: c.layers,
            weight_bytes: m.0.weight_bytes(),
        };
        // SAFETY: checked non-null above.
        unsafe { *info = v };
        Ok(())
    })
}

/// Runs inference on row-major `features` (`num_nodes × in_dim`).
///
/// `logits` receives `num_nodes × classes` values and must hold at least
/// that many. `predictions` may be null; otherwise it receives `num_nodes`
/// class indices.
///
/// # Safety
/// Pointers must be live and sized as stated by the length arguments.
#[no_mangle]
pub unsafe extern "C" fn qgnn_infer(
    model: *const QgnnModel,
    graph: *const QgnnGraph,
    features: *const f64,
    features_len: usize,
    logits: *mut f64,
    logits_len: usize,
    predictions: *mut u32,
    predictions_len: usize,
) -> QgnnStatus {
    guard(|| {
        // SAFETY: caller contract.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        // SAFETY: caller contract.
        let g = unsafe { graph.as_ref() }.ok_or_else(|| null("graph"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        let (n, d, k) = (g.0.n(), m.0.config().in_dim, m.0.config().classes);
        if features_len != n * d {
            return Err((
                QgnnStatus::Shape,
                format!("features hold {features_len} values, expected {n}×{d}"),
            ));
        }
        if logits_len < n * k {
            return Err((QgnnStatus::BufferTooSmall, format!("logits need {} values", n * k)));
        }
        if !predictions.is_null() && predictions_len < n {
            return Err((QgnnStatus::BufferTooSmall, format!("predictions need {n} values")));
        }
        // SAFETY: caller contract, length checked.
        let x = unsafe { std::slice::from_raw_parts(features, features_len) }.to_vec();
        let x = DenseMatrix::new(n, d, x).map_err(lift)?;
        let r = m.0.infer(&g.0, &x).map_err(lift)?;
        // SAFETY: capacity checked above.
        let dst = unsafe { std::slice::from_raw_parts_mut(logits, n * k) };
        dst.copy_from_slice(r.logits.data());
        if !predictions.is_null() {
            // SAFETY: capacity checked above.
            let dst = unsafe { std::slice::from_raw_parts_mut(predictions, n) };
            for (o, &p) in dst.iter_mut().zip(&r.predictions) {
                *o = p as u32;
            }
        }
        Ok(())
    })
}

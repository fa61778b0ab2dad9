//! C ABI over a built index: a similarity graph, its base vectors and an
//! optional learned routing model.
//!
//! Every function returns an [`LrStatus`]. On failure the message is kept in
//! a thread-local slot readable through [`lr_last_error`]. Handles are opaque
//! and must be released with [`lr_index_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use learnroute::data::load_fvecs;
use learnroute::eval::{evaluate_queries, Routing};
use learnroute::graph::SimilarityGraph;
use learnroute::model::{normalized_adjacency, RoutingModel, VertexRepresentations};
use learnroute::search::{routing_budget, ScorerMode, SearchConfig};
use learnroute::Error;
use ndarray::{Array2, ArrayView2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Runtime = 6,
    Panic = 7,
}

/// Routing scorer selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrMode {
    Original = 0,
    Learned = 1,
}

/// Opaque index handle.
pub struct LrIndex {
    graph: SimilarityGraph,
    base: Array2<f32>,
    learned: Option<(RoutingModel, VertexRepresentations)>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LrStatus {
    match e {
        Error::Io(_) => LrStatus::Io,
        Error::Format(_) => LrStatus::Format,
        Error::Argument(_) => LrStatus::InvalidArgument,
        Error::Dimension { .. } | Error::OutOfRange { .. } => LrStatus::Dimension,
        _ => LrStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), LrStatus>) -> LrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            LrStatus::Panic
        }
    }
}

fn fail(e: Error) -> LrStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> LrStatus {
    set_error(&format!("{what} is null"));
    LrStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, LrStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| {
            set_error(&format!("{what} is not valid UTF-8"));
            LrStatus::InvalidArgument
        })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opens a graph file and the fvecs base vectors it was built on.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_index_open(
    graph_path: *const c_char,
    base_path: *const c_char,
    out: *mut *mut LrIndex,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let gp = path_arg(graph_path, "graph_path")?;
        let bp = path_arg(base_path, "base_path")?;
        let graph = SimilarityGraph::load(gp).map_err(fail)?;
        let base = load_fvecs(bp).map_err(fail)?;
        if base.nrows() != graph.num_vertices() {
            return Err(fail(Error::Dimension {
                expected: graph.num_vertices(),
                got: base.nrows(),
            }));
        }
        *out = Box::into_raw(Box::new(LrIndex {
            graph,
            base,
            learned: None,
        }));
        Ok(())
    })
}

/// Loads a routing model and precomputes its vertex representations.
///
/// # Safety
/// `index` must come from [`lr_index_open`]; `model_path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_index_attach_model(index: *mut LrIndex, model_path: *const c_char) -> LrStatus {
    guard(|| {
        let idx = index.as_mut().ok_or_else(|| null("index"))?;
        let mp = path_arg(model_path, "model_path")?;
        let model = RoutingModel::load(mp).map_err(fail)?;
        let adj = normalized_adjacency(&idx.graph.symmetrize());
        let reps = model.vertex_representations(&adj, idx.base.view()).map_err(fail)?;
        idx.learned = Some((model, reps));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_index_shape(index: *const LrIndex, num_vertices: *mut usize, dim: *mut usize) -> LrStatus {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        if num_vertices.is_null() || dim.is_null() {
            return Err(null("output"));
        }
        *num_vertices = idx.base.nrows();
        *dim = idx.base.ncols();
        Ok(())
    })
}

/// Routing scorings available for a configuration (rDCS). `routing_dim`
/// equals `full_dim` for the original scorer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lr_routing_budget(
    dcs: usize,
    k: usize,
    full_dim: usize,
    routing_dim: usize,
    mode: LrMode,
    out: *mut usize,
) -> LrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SearchConfig {
            k,
            routing_dim,
            mode: scorer_mode(mode),
            ..SearchConfig::original(dcs, full_dim)
        };
        cfg.validate().map_err(fail)?;
        *out = routing_budget(&cfg);
        Ok(())
    })
}

fn scorer_mode(m: LrMode) -> ScorerMode {
    match m {
        LrMode::Original => ScorerMode::Original,
        LrMode::Learned => ScorerMode::Learned,
    }
}

/// Budgeted search for one query. Writes up to `capacity` ids, best first,
/// and the number written to `count`. `dcs_used` (nullable) receives the
/// cost including the rerank.
///
/// # Safety
/// `query` must point to `dim` floats; `ids` to `capacity` writable slots.
#[no_mangle]
pub unsafe extern "C" fn lr_index_search(
    index: *const LrIndex,
    query: *const f32,
    dim: usize,
    dcs: usize,
    k: usize,
    mode: LrMode,
    ids: *mut u32,
    capacity: usize,
    count: *mut usize,
    dcs_used: *mut f64,
) -> LrStatus {
    guard(|| {
        let idx = index.as_ref().ok_or_else(|| null("index"))?;
        if query.is_null() {
            return Err(null("query"));
        }
        if count.is_null() || (ids.is_null() && capacity > 0) {
            return Err(null("output"));
        }
        let full = idx.base.ncols();
        if dim != full {
            return Err(fail(Error::Dimension { expected: full, got: dim }));
        }
        let q = std::slice::from_raw_parts(query, dim);
        let qv = ArrayView2::from_shape((1, dim), q).expect("contiguous query");
        let (routing, routing_dim) = match mode {
            LrMode::Original => (Routing::Original, full),
            LrMode::Learned => {
                let (model, reps) = idx.learned.as_ref().ok_or_else(|| {
                    set_error("no model attached");
                    LrStatus::InvalidArgument
                })?;
                (Routing::Learned { model, reps }, model.config.out_dim)
            }
        };
        let cfg = SearchConfig {
            k,
            routing_dim,
            mode: scorer_mode(mode),
            ..SearchConfig::original(dcs, full)
        };
        let mut res = evaluate_queries(&idx.graph, idx.base.view(), qv, &cfg, routing).map_err(fail)?;
        let r = res.pop().expect("one query in, one result out");
        let n = r.ranked.len().min(capacity);
        if n > 0 {
            std::slice::from_raw_parts_mut(ids, n).copy_from_slice(&r.ranked[..n]);
        }
        *count = n;
        if !dcs_used.is_null() {
            *dcs_used = r.dcs_used;
        }
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `index` must come from [`lr_index_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lr_index_free(index: *mut LrIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

//! C ABI over the repdyn core library.
//!
//! Every fallible function returns an [`RdStatus`]; on failure the message is
//! kept per thread and can be read with [`rd_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use repdyn::cka::{cka_arrays, cka_diagram, CkaBatchPlan, SimilarityDiagram};
use repdyn::drs::{drs, fragment_count, LabelGrid};
use repdyn::tensor_io::{open_checkpoint_store, CheckpointStore};
use repdyn::trainer::paper_epoch_grid;
use repdyn::Error;

/// Result codes. Values 2 to 5 match the CLI's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdStatus {
    Ok = 0,
    Config = 2,
    Io = 3,
    MissingInput = 4,
    Numeric = 5,
    NullPointer = 10,
    InvalidUtf8 = 11,
    BufferTooSmall = 12,
    OutOfRange = 13,
    Panic = 14,
}

/// An opened checkpoint store.
pub struct RdStore {
    inner: CheckpointStore,
}

/// A similarity diagram (rows x columns of f64).
pub struct RdDiagram {
    inner: SimilarityDiagram,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: RdStatus, msg: impl Into<String>) -> RdStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> RdStatus {
    match e.exit_code() {
        2 => RdStatus::Config,
        3 => RdStatus::Io,
        4 => RdStatus::MissingInput,
        _ => RdStatus::Numeric,
    }
}

fn guard(f: impl FnOnce() -> Result<(), RdStatus>) -> RdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RdStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(RdStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: repdyn::Result<T>) -> Result<T, RdStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RdStatus> {
    if p.is_null() {
        return Err(fail(RdStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RdStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), RdStatus> {
    if p.is_null() {
        Err(fail(RdStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens and validates the checkpoint store at `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rd_store_open(path: *const c_char, out: *mut *mut RdStore) -> RdStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let store = lift(open_checkpoint_store(path))?;
        *out = Box::into_raw(Box::new(RdStore { inner: store }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from [`rd_store_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rd_store_free(store: *mut RdStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of grid epochs, 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_store_num_epochs(store: *const RdStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.epoch_grid().len())
}

/// Number of probe-set examples, 0 for a null handle.
///
/// # Safety
/// `store` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_store_num_examples(store: *const RdStore) -> usize {
    store.as_ref().map_or(0, |s| s.inner.probe_count())
}

/// # Safety
/// `store` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rd_store_epoch_at(store: *const RdStore, index: usize, out: *mut u32) -> RdStatus {
    guard(|| {
        non_null(store, "store")?;
        non_null(out, "out")?;
        let epochs = (*store).inner.epoch_grid().epochs();
        match epochs.get(index) {
            Some(&t) => {
                *out = t;
                Ok(())
            }
            None => Err(fail(RdStatus::OutOfRange, format!("epoch index {index} >= {}", epochs.len()))),
        }
    })
}

/// CKA diagram of `layer` over the full probe set. `store_col` may be null
/// for a within-run diagram.
///
/// # Safety
/// Handles must be live (or null for `store_col`); `layer` NUL-terminated;
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_cka_diagram(
    store_row: *const RdStore,
    store_col: *const RdStore,
    layer: *const c_char,
    out: *mut *mut RdDiagram,
) -> RdStatus {
    guard(|| {
        non_null(store_row, "store_row")?;
        non_null(out, "out")?;
        let layer = str_arg(layer, "layer")?;
        let row = &(*store_row).inner;
        let col = store_col.as_ref().map_or(row, |s| &s.inner);
        let plan = lift(CkaBatchPlan::full(row.probe_count()))?;
        let d = lift(cka_diagram(row, col, layer, &plan))?;
        *out = Box::into_raw(Box::new(RdDiagram { inner: d }));
        Ok(())
    })
}

/// # Safety
/// `d` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rd_diagram_free(d: *mut RdDiagram) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_diagram_rows(d: *const RdDiagram) -> usize {
    d.as_ref().map_or(0, |d| d.inner.values.nrows())
}

/// # Safety
/// `d` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rd_diagram_cols(d: *const RdDiagram) -> usize {
    d.as_ref().map_or(0, |d| d.inner.values.ncols())
}

/// # Safety
/// `d` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_diagram_value_at(d: *const RdDiagram, row: usize, col: usize, out: *mut f64) -> RdStatus {
    guard(|| {
        non_null(d, "diagram")?;
        non_null(out, "out")?;
        match (*d).inner.values.get((row, col)) {
            Some(&v) => {
                *out = v;
                Ok(())
            }
            None => Err(fail(RdStatus::OutOfRange, format!("cell ({row}, {col}) outside the diagram"))),
        }
    })
}

/// Linear CKA between `f` (`m x p`) and `g` (`m x q`), both row-major.
///
/// # Safety
/// `f` must hold `m*p` values, `g` `m*q` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_cka(f: *const f64, g: *const f64, m: usize, p: usize, q: usize, out: *mut f64) -> RdStatus {
    guard(|| {
        non_null(f, "f")?;
        non_null(g, "g")?;
        non_null(out, "out")?;
        if m.checked_mul(p.max(q)).is_none() {
            return Err(fail(RdStatus::OutOfRange, "matrix size overflows"));
        }
        let fa = ndarray::ArrayView2::from_shape((m, p), slice::from_raw_parts(f, m * p))
            .map_err(|e| fail(RdStatus::Numeric, e.to_string()))?;
        let ga = ndarray::ArrayView2::from_shape((m, q), slice::from_raw_parts(g, m * q))
            .map_err(|e| fail(RdStatus::Numeric, e.to_string()))?;
        *out = lift(cka_arrays(fa, ga))?;
        Ok(())
    })
}

unsafe fn grids(labels: *const u32, planes: usize, rows: usize, cols: usize) -> Result<Vec<LabelGrid>, RdStatus> {
    non_null(labels, "labels")?;
    let total = planes
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| fail(RdStatus::OutOfRange, "grid size overflows"))?;
    let all = slice::from_raw_parts(labels, total);
    (0..planes)
        .map(|p| {
            let cells = all[p * rows * cols..(p + 1) * rows * cols].to_vec();
            lift(LabelGrid::new(p, rows, cols, cells))
        })
        .collect()
}

/// Fraction of cells on which two stacks of label grids agree. Each stack is
/// `planes x rows x cols` row-major.
///
/// # Safety
/// `a` and `b` must each hold `planes*rows*cols` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_drs(
    a: *const u32,
    b: *const u32,
    planes: usize,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> RdStatus {
    guard(|| {
        non_null(out, "out")?;
        let ga = grids(a, planes, rows, cols)?;
        let gb = grids(b, planes, rows, cols)?;
        *out = lift(drs(&ga, &gb))?;
        Ok(())
    })
}

/// 4-connected same-label regions of one `rows x cols` grid.
///
/// # Safety
/// `labels` must hold `rows*cols` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_fragment_count(labels: *const u32, rows: usize, cols: usize, out: *mut usize) -> RdStatus {
    guard(|| {
        non_null(out, "out")?;
        let g = grids(labels, 1, rows, cols)?;
        *out = fragment_count(&g[0]);
        Ok(())
    })
}

/// Writes the default three-phase epoch grid for `total_epochs` into `buf`.
/// `out_len` receives the grid length; if `capacity` is smaller nothing is
/// written and `RD_STATUS_BUFFER_TOO_SMALL` is returned. `buf` may be null
/// when `capacity` is 0.
///
/// # Safety
/// `buf` must have room for `capacity` values; `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn rd_paper_epoch_grid(total_epochs: u32, buf: *mut u32, capacity: usize, out_len: *mut usize) -> RdStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let grid = lift(paper_epoch_grid(total_epochs, 3, 5))?;
        let epochs = grid.epochs();
        *out_len = epochs.len();
        if capacity < epochs.len() {
            return Err(fail(
                RdStatus::BufferTooSmall,
                format!("grid has {} epochs, buffer holds {capacity}", epochs.len()),
            ));
        }
        non_null(buf, "buf")?;
        slice::from_raw_parts_mut(buf, epochs.len()).copy_from_slice(epochs);
        Ok(())
    })
}

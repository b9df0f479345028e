//! C ABI over `smes-core`.
//!
//! Every fallible function returns an [`SmesStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`smes_last_error_message`]. Handles are opaque and must be released
//! with their matching `_free` function.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Mutex;
use std::time::Duration;

use smes_core::linalg::softmax;
use smes_core::workspace::{BlockHandle, WorkspaceError, WorkspacePool};
use smes_core::{
    checkpoint, forward_sparse, progressive_route, Error, Matrix, ModelDims, ModelSpec, MoeModel,
    RoutingBudget,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmesStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Timeout = 5,
    Infeasible = 6,
    /// The metric is undefined for the input (single class, no users).
    Undefined = 7,
    BufferTooSmall = 8,
    Internal = 9,
}

/// Model shape as seen from C.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SmesDims {
    pub features: usize,
    pub encoder_hidden: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub experts: usize,
    pub tasks: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SmesBlock {
    pub id: u64,
    pub start: usize,
    pub len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SmesPoolStats {
    pub page_size: usize,
    pub page_count: usize,
    pub pages_in_use: usize,
    pub held_blocks: usize,
    pub allocations: u64,
    pub releases: u64,
    pub wait_events: u64,
    pub timeouts: u64,
    pub peak_pages_in_use: usize,
}

/// Opaque model handle.
pub struct SmesModel {
    model: MoeModel,
}

/// Opaque workspace pool handle.
pub struct SmesPool {
    pool: WorkspacePool,
    held: Mutex<HashMap<u64, BlockHandle>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SmesStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SmesStatus::Io,
            Error::Checkpoint(_) | Error::Parse { .. } | Error::Csv(_) => SmesStatus::Format,
            Error::SingleClass { .. } | Error::NoQualifyingUsers { .. } => SmesStatus::Undefined,
            Error::Workspace(w) => return Failure::from(w.clone()),
            _ => SmesStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<WorkspaceError> for Failure {
    fn from(e: WorkspaceError) -> Self {
        let status = match e {
            WorkspaceError::Timeout { .. } => SmesStatus::Timeout,
            WorkspaceError::Infeasible { .. } => SmesStatus::Infeasible,
            _ => SmesStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: SmesStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> SmesStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| Err(fail(SmesStatus::Internal, "panic")));
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmesStatus::Ok
        }
        Err(Failure(status, msg)) => {
            let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
            status
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SmesStatus::NullPointer, "null input array"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(SmesStatus::NullPointer, "null output array"));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(SmesStatus::NullPointer, "null path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SmesStatus::InvalidArgument, "path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(SmesStatus::NullPointer, "null output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Message for the last failed call on this thread, or NULL after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn smes_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Freshly initialized progressive-routing model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn smes_model_new(
    dims: SmesDims,
    shared: usize,
    adaptive: usize,
    seed: u64,
    out: *mut *mut SmesModel,
) -> SmesStatus {
    run(|| {
        let dims = ModelDims {
            features: dims.features,
            encoder_hidden: dims.encoder_hidden,
            d_in: dims.d_in,
            d_out: dims.d_out,
            experts: dims.experts,
            tasks: dims.tasks,
        };
        let model = MoeModel::init(ModelSpec::progressive(dims, shared, adaptive)?, seed)?;
        write_out(out, Box::into_raw(Box::new(SmesModel { model })))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`smes_model_new`].
#[no_mangle]
pub unsafe extern "C" fn smes_model_load(
    path: *const c_char,
    out: *mut *mut SmesModel,
) -> SmesStatus {
    run(|| {
        let model = checkpoint::load(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(SmesModel { model })))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn smes_model_save(
    model: *const SmesModel,
    path: *const c_char,
) -> SmesStatus {
    run(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null model"))?;
        checkpoint::save(&path_arg(path)?, &m.model)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smes_model_dims(
    model: *const SmesModel,
    out: *mut SmesDims,
) -> SmesStatus {
    run(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null model"))?;
        let d = m.model.dims();
        write_out(
            out,
            SmesDims {
                features: d.features,
                encoder_hidden: d.encoder_hidden,
                d_in: d.d_in,
                d_out: d.d_out,
                experts: d.experts,
                tasks: d.tasks,
            },
        )
    })
}

/// Predicts `rows` instances. `features` is `rows x features` row-major;
/// `out` receives `rows x tasks` probabilities and must hold `out_len`
/// values.
///
/// # Safety
/// Array pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn smes_model_predict(
    model: *const SmesModel,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> SmesStatus {
    run(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null model"))?;
        let tasks = m.model.dims().tasks;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(SmesStatus::InvalidArgument, "rows x cols overflows"))?;
        if out_len < rows * tasks {
            return Err(fail(
                SmesStatus::BufferTooSmall,
                "output needs rows x tasks values",
            ));
        }
        let x = Matrix::new(rows, cols, slice(features, n)?.to_vec())?;
        let pass = forward_sparse(&x, &m.model)?;
        let dst = slice_mut(out, rows * tasks)?;
        for (chunk, p) in dst.chunks_mut(tasks.max(1)).zip(&pass.predictions) {
            chunk.copy_from_slice(p);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smes_model_free(model: *mut SmesModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smes_pool_new(
    page_size: usize,
    page_count: usize,
    out: *mut *mut SmesPool,
) -> SmesStatus {
    run(|| {
        let pool = WorkspacePool::new(page_size, page_count)?;
        let handle = SmesPool {
            pool,
            held: Mutex::new(HashMap::new()),
        };
        write_out(out, Box::into_raw(Box::new(handle)))
    })
}

/// Blocks until `pages` contiguous pages are free. A negative
/// `timeout_ms` waits indefinitely.
///
/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smes_pool_allocate(
    pool: *const SmesPool,
    pages: usize,
    timeout_ms: i64,
    out: *mut SmesBlock,
) -> SmesStatus {
    run(|| {
        let p = pool
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null pool"))?;
        if out.is_null() {
            return Err(fail(SmesStatus::NullPointer, "null output pointer"));
        }
        let block = if timeout_ms < 0 {
            p.pool.allocate(pages, None)?
        } else {
            p.pool
                .allocate_within(pages, Duration::from_millis(timeout_ms as u64))?
        };
        p.held
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(block.id(), block);
        write_out(
            out,
            SmesBlock {
                id: block.id(),
                start: block.start(),
                len: block.len(),
            },
        )
    })
}

/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn smes_pool_release(pool: *const SmesPool, block_id: u64) -> SmesStatus {
    run(|| {
        let p = pool
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null pool"))?;
        let block = p
            .held
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .remove(&block_id)
            .ok_or(WorkspaceError::UnknownBlock(block_id))?;
        p.pool.release(block)?;
        Ok(())
    })
}

/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smes_pool_stats(
    pool: *const SmesPool,
    out: *mut SmesPoolStats,
) -> SmesStatus {
    run(|| {
        let p = pool
            .as_ref()
            .ok_or_else(|| fail(SmesStatus::NullPointer, "null pool"))?;
        let s = p.pool.stats();
        write_out(
            out,
            SmesPoolStats {
                page_size: s.page_size,
                page_count: s.page_count,
                pages_in_use: s.pages_in_use,
                held_blocks: s.held_blocks,
                allocations: s.allocations,
                releases: s.releases,
                wait_events: s.wait_events,
                timeouts: s.timeouts,
                peak_pages_in_use: s.peak_pages_in_use,
            },
        )
    })
}

/// # Safety
/// `pool` must be NULL or a handle not yet freed, with no thread blocked
/// in [`smes_pool_allocate`] on it.
#[no_mangle]
pub unsafe extern "C" fn smes_pool_free(pool: *mut SmesPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smes_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> SmesStatus {
    run(|| {
        let v = smes_core::auc(slice(scores, n)?, slice(labels, n)?)?;
        write_out(out, v)
    })
}

/// GAUC with integer user ids.
///
/// # Safety
/// `scores`, `labels` and `users` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn smes_gauc(
    scores: *const f64,
    labels: *const u8,
    users: *const u64,
    n: usize,
    out: *mut f64,
) -> SmesStatus {
    run(|| {
        let v = smes_core::gauc(slice(scores, n)?, slice(labels, n)?, slice(users, n)?)?;
        write_out(out, v)
    })
}

/// Progressive routing for one instance. `logits` is `tasks x experts`
/// row-major; `task_weights` may be NULL for uniform weights.
/// `active_out` receives `tasks x (shared + adaptive)` expert ids, each
/// row sorted ascending. `union_out` must hold `experts` values; the
/// union size is written to `union_len`.
///
/// # Safety
/// Array pointers must be valid for the stated lengths.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn smes_progressive_route(
    logits: *const f64,
    tasks: usize,
    experts: usize,
    shared: usize,
    adaptive: usize,
    task_weights: *const f64,
    active_out: *mut u32,
    union_out: *mut u32,
    union_len: *mut usize,
) -> SmesStatus {
    run(|| {
        let n = tasks
            .checked_mul(experts)
            .ok_or_else(|| fail(SmesStatus::InvalidArgument, "tasks x experts overflows"))?;
        if n == 0 {
            return Err(fail(SmesStatus::InvalidArgument, "empty logits"));
        }
        let z: Vec<Vec<f64>> = slice(logits, n)?
            .chunks(experts)
            .map(<[f64]>::to_vec)
            .collect();
        let w = if task_weights.is_null() {
            vec![1.0; tasks]
        } else {
            slice(task_weights, tasks)?.to_vec()
        };
        let probs = z
            .iter()
            .map(|row| softmax(row))
            .collect::<Result<Vec<_>, _>>()?;
        let budget = RoutingBudget::new(shared, adaptive, experts)?;
        let d = progressive_route(&z, &probs, budget, &w)?;
        if union_len.is_null() {
            return Err(fail(SmesStatus::NullPointer, "null union_len"));
        }
        let k = budget.total();
        let active = slice_mut(active_out, tasks * k)?;
        for (row, kt) in active.chunks_mut(k.max(1)).zip(&d.active) {
            let mut kt = kt.clone();
            kt.sort_unstable();
            for (dst, e) in row.iter_mut().zip(kt) {
                *dst = e as u32;
            }
        }
        let union = slice_mut(union_out, experts)?;
        for (dst, &e) in union.iter_mut().zip(&d.union) {
            *dst = e as u32;
        }
        write_out(union_len, d.union.len())
    })
}

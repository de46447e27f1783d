//! C ABI over the dtnsim library.
//!
//! Engines are opaque handles created by `dtn_engine_new_*` and released with
//! `dtn_engine_free`. Every fallible call returns a [`DtnStatus`]; the message
//! for the last failure on the calling thread is available from
//! `dtn_last_error`. Variable-length results are copied into caller buffers
//! using the size-query convention: pass a null or short buffer to learn the
//! required length through `needed`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dtnsim::bsp;
use dtnsim::bundle::{Priority, DEFAULT_TTL_S};
use dtnsim::sim::{Engine, ScenarioSpec, SimError, Submission};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    NotFound = 4,
    Integrity = 5,
    Engine = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque simulation engine.
pub struct DtnEngine {
    inner: Engine,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: DtnStatus, msg: impl Into<String>) -> DtnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn sim_status(e: SimError) -> DtnStatus {
    let status = match &e {
        SimError::UnknownNode(_) | SimError::Config(_) => DtnStatus::InvalidArgument,
        SimError::NotFound(_) => DtnStatus::NotFound,
        SimError::Security(_) | SimError::Bundle(_) | SimError::Fragment(_) => DtnStatus::Integrity,
        _ => DtnStatus::Engine,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> DtnStatus) -> DtnStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(DtnStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, DtnStatus> {
    if p.is_null() {
        return Err(fail(DtnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DtnStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// Copies `data` to `buf` when it fits. `needed` always receives the full
/// length (plus one for text, for the terminating NUL).
unsafe fn copy_out(data: &[u8], text: bool, buf: *mut u8, cap: usize, needed: *mut usize) -> DtnStatus {
    let total = data.len() + usize::from(text);
    if !needed.is_null() {
        *needed = total;
    }
    if buf.is_null() || cap < total {
        return fail(DtnStatus::BufferTooSmall, format!("buffer needs {total} bytes"));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    if text {
        *buf.add(data.len()) = 0;
    }
    DtnStatus::Ok
}

unsafe fn engine_mut<'a>(e: *mut DtnEngine) -> Result<&'a mut Engine, DtnStatus> {
    e.as_mut()
        .map(|e| &mut e.inner)
        .ok_or_else(|| fail(DtnStatus::NullPointer, "engine is null"))
}

fn build(spec: Result<ScenarioSpec, SimError>, out: *mut *mut DtnEngine) -> DtnStatus {
    if out.is_null() {
        return fail(DtnStatus::NullPointer, "out is null");
    }
    let engine = spec.and_then(|s| {
        s.validate()?;
        Engine::from_spec(&s)
    });
    match engine {
        Ok(inner) => {
            // SAFETY: checked non-null above
            unsafe { *out = Box::into_raw(Box::new(DtnEngine { inner })) };
            DtnStatus::Ok
        }
        Err(e) => sim_status(e),
    }
}

/// Length of the base64 ciphertext for a plaintext of `plaintext_len` bytes.
#[no_mangle]
pub extern "C" fn dtn_encrypted_size(plaintext_len: usize) -> usize {
    bsp::encrypted_size(plaintext_len)
}

/// Copies the last error message of this thread as NUL-terminated text.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null; `needed` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn dtn_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> DtnStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    copy_out(msg.as_bytes(), true, buf.cast(), cap, needed)
}

/// Engine for a built-in profile (`E1`, `E4`, `E5`) with its injections scheduled.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_new_profile(name: *const c_char, out: *mut *mut DtnEngine) -> DtnStatus {
    guard(|| match str_arg(name, "name") {
        Ok(n) => build(ScenarioSpec::profile(n), out),
        Err(s) => s,
    })
}

/// Engine for a scenario given as TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_new_toml(toml: *const c_char, out: *mut *mut DtnEngine) -> DtnStatus {
    guard(|| match str_arg(toml, "toml") {
        Ok(t) => build(ScenarioSpec::from_toml(t), out),
        Err(s) => s,
    })
}

/// # Safety
/// `engine` must come from `dtn_engine_new_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_free(engine: *mut DtnEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Advances the engine by `ticks` steps.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_step(engine: *mut DtnEngine, ticks: u64) -> DtnStatus {
    guard(|| {
        let e = match engine_mut(engine) {
            Ok(e) => e,
            Err(s) => return s,
        };
        for _ in 0..ticks {
            if let Err(err) = e.step() {
                return sim_status(err);
            }
        }
        DtnStatus::Ok
    })
}

/// Runs until every bundle settles or the scenario duration ends.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_run(engine: *mut DtnEngine) -> DtnStatus {
    guard(|| match engine_mut(engine) {
        Ok(e) => e.run_to_completion().map_or_else(sim_status, |_| DtnStatus::Ok),
        Err(s) => s,
    })
}

/// Seconds of virtual time since the scenario start.
///
/// # Safety
/// `engine` must be a live handle or null (returns a negative value).
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_elapsed_s(engine: *const DtnEngine) -> f64 {
    engine.as_ref().map_or(-1.0, |e| e.inner.elapsed_s())
}

/// Creates a bundle at `source` now and writes its id (NUL-terminated).
/// `priority` is 0 bulk, 1 normal, 2 expedited. When `id_cap` is below the
/// worst-case id length nothing is created and `needed` receives that bound.
///
/// # Safety
/// String arguments must be NUL-terminated; `data` must be valid for `len`
/// bytes; `id_buf` for `id_cap` bytes or null; `needed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_submit(
    engine: *mut DtnEngine,
    source: *const c_char,
    destination: *const c_char,
    data: *const u8,
    len: usize,
    priority: u32,
    custody: bool,
    id_buf: *mut c_char,
    id_cap: usize,
    needed: *mut usize,
) -> DtnStatus {
    guard(|| {
        let run = || -> Result<DtnStatus, DtnStatus> {
            let e = engine_mut(engine)?;
            let source = str_arg(source, "source")?;
            let destination = str_arg(destination, "destination")?;
            if data.is_null() || len == 0 {
                return Err(fail(DtnStatus::InvalidArgument, "payload is empty"));
            }
            let priority = match priority {
                0 => Priority::Bulk,
                1 => Priority::Normal,
                2 => Priority::Expedited,
                p => return Err(fail(DtnStatus::InvalidArgument, format!("priority {p} out of range"))),
            };
            let sub = Submission {
                source: source.to_string(),
                destination: destination.to_string(),
                plaintext: std::slice::from_raw_parts(data, len).to_vec(),
                priority,
                custody,
                ttl_s: DEFAULT_TTL_S,
            };
            e.check_submission(&sub).map_err(sim_status)?;
            // ids are `{source}-{millis}-{8 hex}`; refuse before creating anything
            let bound = source.len() + 1 + 20 + 1 + 8 + 1;
            if id_buf.is_null() || id_cap < bound {
                if !needed.is_null() {
                    *needed = bound;
                }
                return Err(fail(DtnStatus::BufferTooSmall, format!("id buffer needs {bound} bytes")));
            }
            let receipt = e.submit(sub).map_err(sim_status)?;
            Ok(copy_out(receipt.bundle_id.as_bytes(), true, id_buf.cast(), id_cap, needed))
        };
        run().unwrap_or_else(|s| s)
    })
}

/// Writes the run metrics as JSON text (NUL-terminated).
///
/// # Safety
/// `engine` must be a live handle; `buf` valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_metrics_json(
    engine: *mut DtnEngine,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> DtnStatus {
    guard(|| match engine_mut(engine) {
        Ok(e) => copy_out(e.metrics().summary_json().as_bytes(), true, buf.cast(), cap, needed),
        Err(s) => s,
    })
}

/// Verifies and decrypts bundle `bundle_id` delivered at `node`.
///
/// # Safety
/// String arguments must be NUL-terminated; `buf` valid for `cap` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn dtn_engine_decrypt(
    engine: *mut DtnEngine,
    node: *const c_char,
    bundle_id: *const c_char,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> DtnStatus {
    guard(|| {
        let run = || -> Result<DtnStatus, DtnStatus> {
            let e = engine_mut(engine)?;
            let node = str_arg(node, "node")?;
            let id = str_arg(bundle_id, "bundle_id")?;
            let plain = e.decrypt_at(node, id).map_err(sim_status)?;
            Ok(copy_out(&plain, false, buf, cap, needed))
        };
        run().unwrap_or_else(|s| s)
    })
}

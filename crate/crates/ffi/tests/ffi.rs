use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dtnsim_ffi::*;

const SCENARIO: &str = "name = \"ffi\"\nduration_s = 600.0\n[schedule]\nkind = \"ALWAYS_UP\"\n";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = [0 as std::ffi::c_char; 256];
    let mut need = 0;
    unsafe { dtn_last_error(buf.as_mut_ptr(), buf.len(), &mut need) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn engine() -> *mut DtnEngine {
    let mut e = ptr::null_mut();
    let toml = c(SCENARIO);
    assert_eq!(unsafe { dtn_engine_new_toml(toml.as_ptr(), &mut e) }, DtnStatus::Ok);
    assert!(!e.is_null());
    e
}

#[test]
fn sizes_match_library() {
    assert_eq!(dtn_encrypted_size(64), 108);
    assert_eq!(dtn_encrypted_size(16384), 21868);
}

#[test]
fn submit_run_decrypt() {
    let e = engine();
    let (src, dst, iss) = (c("london"), c("ISS"), c("ISS"));
    let msg = b"over the C boundary";
    let mut id = vec![0 as std::ffi::c_char; 4];
    let mut need = 0;
    // too small: reports the size, copies nothing
    let st = unsafe {
        dtn_engine_submit(e, src.as_ptr(), dst.as_ptr(), msg.as_ptr(), msg.len(), 2, true, id.as_mut_ptr(), id.len(), &mut need)
    };
    assert_eq!(st, DtnStatus::BufferTooSmall);
    assert!(need > 4);
    id.resize(need, 0);
    let st = unsafe {
        dtn_engine_submit(e, src.as_ptr(), dst.as_ptr(), msg.as_ptr(), msg.len(), 2, true, id.as_mut_ptr(), id.len(), &mut need)
    };
    assert_eq!(st, DtnStatus::Ok);
    assert_eq!(unsafe { dtn_engine_run(e) }, DtnStatus::Ok);
    assert!(unsafe { dtn_engine_elapsed_s(e) } > 0.0);

    let mut out = vec![0u8; 64];
    let st = unsafe { dtn_engine_decrypt(e, iss.as_ptr(), id.as_ptr(), out.as_mut_ptr(), out.len(), &mut need) };
    assert_eq!(st, DtnStatus::Ok);
    assert_eq!(&out[..need], msg);

    let mut json = vec![0 as std::ffi::c_char; 1];
    assert_eq!(
        unsafe { dtn_engine_metrics_json(e, json.as_mut_ptr(), json.len(), &mut need) },
        DtnStatus::BufferTooSmall
    );
    json.resize(need, 0);
    assert_eq!(unsafe { dtn_engine_metrics_json(e, json.as_mut_ptr(), json.len(), &mut need) }, DtnStatus::Ok);
    let text = unsafe { CStr::from_ptr(json.as_ptr()) }.to_str().unwrap();
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    assert_eq!(v["delivered"], 1);
    unsafe { dtn_engine_free(e) };
}

#[test]
fn errors_are_codes_with_messages() {
    let e = engine();
    let (bad, dst) = (c("atlantis"), c("ISS"));
    let st = unsafe {
        dtn_engine_submit(e, bad.as_ptr(), dst.as_ptr(), b"x".as_ptr(), 1, 1, true, ptr::null_mut(), 0, ptr::null_mut())
    };
    assert_eq!(st, DtnStatus::InvalidArgument);
    assert!(last_error().contains("atlantis"));
    let st = unsafe {
        dtn_engine_submit(e, dst.as_ptr(), c("toronto").as_ptr(), b"x".as_ptr(), 1, 9, true, ptr::null_mut(), 0, ptr::null_mut())
    };
    assert_eq!(st, DtnStatus::InvalidArgument);
    let (iss, missing) = (c("ISS"), c("no-such-bundle"));
    let st = unsafe { dtn_engine_decrypt(e, iss.as_ptr(), missing.as_ptr(), ptr::null_mut(), 0, ptr::null_mut()) };
    assert_eq!(st, DtnStatus::NotFound);
    assert_eq!(unsafe { dtn_engine_run(ptr::null_mut()) }, DtnStatus::NullPointer);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { dtn_engine_new_profile(ptr::null(), &mut out) }, DtnStatus::NullPointer);
    let nope = c("E99");
    assert_eq!(unsafe { dtn_engine_new_profile(nope.as_ptr(), &mut out) }, DtnStatus::InvalidArgument);
    assert!(out.is_null());
    unsafe { dtn_engine_free(e) };
    unsafe { dtn_engine_free(ptr::null_mut()) };
}

#[test]
fn builtin_profile_handle() {
    let mut e = ptr::null_mut();
    let name = c("E5");
    assert_eq!(unsafe { dtn_engine_new_profile(name.as_ptr(), &mut e) }, DtnStatus::Ok);
    assert_eq!(unsafe { dtn_engine_step(e, 10) }, DtnStatus::Ok);
    assert!((unsafe { dtn_engine_elapsed_s(e) } - 1.0).abs() < 1e-9);
    unsafe { dtn_engine_free(e) };
}

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn find_staticlib() -> Option<PathBuf> {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libdtnsim_ffi.a");
    lib.exists().then_some(lib)
}

fn have(cmd: &str) -> bool {
    Command::new(cmd).arg("--version").output().is_ok()
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(manifest().join("include/dtnsim.h")).unwrap();
    for sym in [
        "dtn_encrypted_size",
        "dtn_engine_new_toml",
        "dtn_engine_submit",
        "dtn_engine_decrypt",
        "DTN_STATUS_BUFFER_TOO_SMALL",
        "typedef struct DtnEngine DtnEngine",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let Some(lib) = find_staticlib() else {
        eprintln!("static library not built; skipping C link test");
        return;
    };
    if !have("cc") {
        eprintln!("no C compiler; skipping C link test");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("roundtrip");
    let status = Command::new("cc")
        .arg(manifest().join("tests/c/roundtrip.c"))
        .arg("-I")
        .arg(manifest().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(Path::new(&exe)).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

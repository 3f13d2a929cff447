//! C interface: a blocking Sector client, the scenario harness and the sort
//! data generator.
//!
//! Every call returns a [`SectorStatus`]. On failure a message is available
//! from [`sector_last_error`] on the same thread. Memory handed out by this
//! library is released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Duration;

use sector::apps::gensort;
use sector::cli::{self, RemoteClient};
use sector::client::JobSpec;
use sector::harness::scenario::Scenario;
use sector::proto::OutputMode;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectorStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Remote = 5,
    /// The job ran but some segments failed; the report is still returned.
    JobFailed = 6,
    /// A scenario finished but diverged from the reference.
    Mismatch = 7,
    Panic = 8,
}

/// Bytes owned by the library.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SectorBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// A logged-in client session.
pub struct SectorClient {
    inner: RemoteClient,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(SectorStatus, String);

impl Fail {
    fn new(status: SectorStatus, msg: impl ToString) -> Self {
        Self(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<SectorStatus, Fail>) -> SectorStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside sector library");
            SectorStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(SectorStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::new(SectorStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail::new(SectorStatus::NullArgument, format!("{what} is null")))
}

unsafe fn client<'a>(c: *mut SectorClient) -> Result<&'a SectorClient, Fail> {
    c.as_ref()
        .ok_or_else(|| Fail::new(SectorStatus::NullArgument, "client is null"))
}

fn into_cstring(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

fn into_buffer(v: Vec<u8>) -> SectorBuffer {
    let boxed = v.into_boxed_slice();
    let len = boxed.len();
    SectorBuffer {
        data: Box::into_raw(boxed) as *mut u8,
        len,
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sector_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn sector_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Connects to the master at `master` ("host:port") and logs in.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings and `out` a valid
/// pointer. The handle written to `out` must be released with
/// [`sector_client_free`].
#[no_mangle]
pub unsafe extern "C" fn sector_client_connect(
    master: *const c_char,
    psk_hex: *const c_char,
    user: *const c_char,
    password: *const c_char,
    out: *mut *mut SectorClient,
) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let master: SocketAddr = text(master, "master")?
            .parse()
            .map_err(|e| Fail::new(SectorStatus::InvalidArgument, format!("master: {e}")))?;
        let psk = cli::parse_psk(text(psk_hex, "psk")?).map_err(|e| Fail::new(SectorStatus::InvalidArgument, e))?;
        let user = text(user, "user")?;
        let password = text(password, "password")?;
        let ip = cli::local_ip_towards(master).map_err(|e| Fail::new(SectorStatus::Io, e))?;
        let inner = RemoteClient::connect(master, psk, SocketAddr::new(ip, 0), Duration::from_secs(120))
            .map_err(|e| Fail::new(SectorStatus::Io, e))?;
        if let Err(e) = inner.login(user, password) {
            inner.stop();
            return Err(Fail::new(SectorStatus::Remote, format!("login: {e}")));
        }
        *out = Box::into_raw(Box::new(SectorClient { inner }));
        Ok(SectorStatus::Ok)
    })
}

/// Stops the client and releases the handle. Null is ignored.
///
/// # Safety
/// `c` must be null or a handle from [`sector_client_connect`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sector_client_free(c: *mut SectorClient) {
    if !c.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| Box::from_raw(c).inner.stop()));
    }
}

/// Stores `len` bytes at `path`.
///
/// # Safety
/// `c` must be a live handle, `path` a NUL-terminated string and `data` valid
/// for `len` bytes (it may be null when `len` is 0).
#[no_mangle]
pub unsafe extern "C" fn sector_client_upload(
    c: *mut SectorClient,
    path: *const c_char,
    data: *const u8,
    len: usize,
) -> SectorStatus {
    guard(|| {
        let c = client(c)?;
        let path = text(path, "path")?;
        let bytes = if len == 0 {
            Vec::new()
        } else if data.is_null() {
            return Err(Fail::new(SectorStatus::NullArgument, "data is null"));
        } else {
            std::slice::from_raw_parts(data, len).to_vec()
        };
        c.inner
            .upload(path, bytes, None)
            .map_err(|e| Fail::new(SectorStatus::Remote, format!("{path}: {e}")))?;
        Ok(SectorStatus::Ok)
    })
}

/// Reads the file at `path` into a buffer released with [`sector_buffer_free`].
///
/// # Safety
/// `c` must be a live handle, `path` a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sector_client_download(
    c: *mut SectorClient,
    path: *const c_char,
    out: *mut SectorBuffer,
) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_buffer(Vec::new());
        let c = client(c)?;
        let path = text(path, "path")?;
        let data = c
            .inner
            .download(path)
            .map_err(|e| Fail::new(SectorStatus::Remote, format!("{path}: {e}")))?;
        *out = into_buffer(data);
        Ok(SectorStatus::Ok)
    })
}

/// Writes a JSON array of the paths matching `pattern` to `out_json`.
///
/// # Safety
/// `c` must be a live handle, `pattern` a NUL-terminated string and `out_json`
/// valid. The string is released with [`sector_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sector_client_list(
    c: *mut SectorClient,
    pattern: *const c_char,
    out_json: *mut *mut c_char,
) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        *out = ptr::null_mut();
        let c = client(c)?;
        let paths = c
            .inner
            .expand(text(pattern, "pattern")?)
            .map_err(|e| Fail::new(SectorStatus::Remote, e))?;
        *out = into_cstring(serde_json::to_string(&paths).expect("json"));
        Ok(SectorStatus::Ok)
    })
}

/// Runs `udf` over every file matching `input`. `buckets` of 0 keeps output
/// local to each engine. The JSON job report is written to `out_json` even
/// when segments failed.
///
/// # Safety
/// `c` must be a live handle, strings NUL-terminated and `out_json` valid.
/// The string is released with [`sector_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sector_client_submit(
    c: *mut SectorClient,
    input: *const c_char,
    udf: *const c_char,
    buckets: u32,
    per_file: bool,
    out_json: *mut *mut c_char,
) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        *out = ptr::null_mut();
        let c = client(c)?;
        let pattern = text(input, "input")?;
        let inputs = c.inner.expand(pattern).map_err(|e| Fail::new(SectorStatus::Remote, e))?;
        if inputs.is_empty() {
            return Err(Fail::new(SectorStatus::InvalidArgument, format!("no files match `{pattern}`")));
        }
        let mode = match buckets {
            0 => OutputMode::Local,
            b => OutputMode::Buckets(b),
        };
        let mut spec = JobSpec::new(inputs, text(udf, "udf")?, mode);
        spec.per_file = per_file;
        let report = c.inner.job(spec).map_err(|e| Fail::new(SectorStatus::Remote, e))?;
        *out = into_cstring(cli::report_json(&report).to_string());
        if report.failures.is_empty() {
            Ok(SectorStatus::Ok)
        } else {
            set_error(format!("{} segments failed", report.failures.len()));
            Ok(SectorStatus::JobFailed)
        }
    })
}

/// Runs a TOML scenario on the simulated cluster and writes the JSON report.
///
/// # Safety
/// `scenario_toml` must be NUL-terminated and `out_json` valid. The string is
/// released with [`sector_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sector_harness_run(scenario_toml: *const c_char, out_json: *mut *mut c_char) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out_json, "out_json")?;
        *out = ptr::null_mut();
        let sc = Scenario::parse(text(scenario_toml, "scenario")?)
            .map_err(|e| Fail::new(SectorStatus::InvalidArgument, e))?;
        let runs = sc.run().map_err(|e| Fail::new(SectorStatus::Remote, e))?;
        let matched = runs.iter().all(|r| r.matched);
        *out = into_cstring(serde_json::json!({ "matched": matched, "runs": runs }).to_string());
        if matched {
            Ok(SectorStatus::Ok)
        } else {
            set_error("scenario diverged from the reference");
            Ok(SectorStatus::Mismatch)
        }
    })
}

/// Generates `bytes` of sort records for `node`, as the data generator does.
///
/// # Safety
/// `out` must be valid. The buffer is released with [`sector_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn sector_gensort(node: usize, bytes: u64, seed: u64, out: *mut SectorBuffer) -> SectorStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = into_buffer(Vec::new());
        let data = gensort::generate(node, bytes, seed).map_err(|e| Fail::new(SectorStatus::InvalidArgument, e))?;
        *out = into_buffer(data);
        Ok(SectorStatus::Ok)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sector_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `buf` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sector_buffer_free(buf: SectorBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = sector_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    #[test]
    fn version_is_crate_version() {
        let v = unsafe { CStr::from_ptr(sector_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn gensort_buffer_matches_generator() {
        let mut buf = SectorBuffer { data: ptr::null_mut(), len: 0 };
        assert_eq!(unsafe { sector_gensort(2, 1000, 7, &mut buf) }, SectorStatus::Ok);
        let got = unsafe { std::slice::from_raw_parts(buf.data, buf.len) }.to_vec();
        assert_eq!(got, gensort::generate(2, 1000, 7).unwrap());
        unsafe { sector_buffer_free(buf) };
    }

    #[test]
    fn misaligned_gensort_is_invalid() {
        let mut buf = SectorBuffer { data: ptr::null_mut(), len: 0 };
        assert_eq!(unsafe { sector_gensort(0, 150, 0, &mut buf) }, SectorStatus::InvalidArgument);
        assert!(last_error().contains("150"));
        assert_eq!(buf.len, 0);
        unsafe { sector_buffer_free(buf) };
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        let s = unsafe { sector_client_connect(ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut out) };
        assert_eq!(s, SectorStatus::NullArgument);
        assert!(out.is_null());
        assert_eq!(unsafe { sector_gensort(0, 100, 0, ptr::null_mut()) }, SectorStatus::NullArgument);
        let mut json = ptr::null_mut();
        assert_eq!(
            unsafe { sector_client_list(ptr::null_mut(), c"/".as_ptr(), &mut json) },
            SectorStatus::NullArgument
        );
        unsafe { sector_client_free(ptr::null_mut()) };
        unsafe { sector_string_free(ptr::null_mut()) };
    }

    #[test]
    fn bad_connect_arguments() {
        let mut out = ptr::null_mut();
        let s = unsafe {
            sector_client_connect(c"not-an-addr".as_ptr(), c"00".as_ptr(), c"u".as_ptr(), c"p".as_ptr(), &mut out)
        };
        assert_eq!(s, SectorStatus::InvalidArgument);
        let s = unsafe {
            sector_client_connect(c"127.0.0.1:9".as_ptr(), c"xyz".as_ptr(), c"u".as_ptr(), c"p".as_ptr(), &mut out)
        };
        assert_eq!(s, SectorStatus::InvalidArgument);
        assert!(last_error().contains("psk"));
        let bad = [0xffu8, 0xfe, 0];
        let s = unsafe {
            sector_client_connect(bad.as_ptr() as *const c_char, c"00".as_ptr(), c"u".as_ptr(), c"p".as_ptr(), &mut out)
        };
        assert_eq!(s, SectorStatus::InvalidUtf8);
    }

    #[test]
    fn harness_scenario_round_trip() {
        let toml = c"[cluster]\nseed = 4\n\n[[inputs]]\nkind = \"gensort\"\nbytes_per_node = 5000\n\n[job]\napp = \"terasort\"\nbuckets = 3\n";
        let mut json = ptr::null_mut();
        assert_eq!(unsafe { sector_harness_run(toml.as_ptr(), &mut json) }, SectorStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
        assert_eq!(v["matched"], true);
        assert_eq!(v["runs"].as_array().unwrap().len(), 1);
        unsafe { sector_string_free(json) };
    }

    #[test]
    fn malformed_scenario_is_invalid() {
        let mut json = ptr::null_mut();
        assert_eq!(unsafe { sector_harness_run(c"job = 3".as_ptr(), &mut json) }, SectorStatus::InvalidArgument);
        assert!(json.is_null());
    }
}

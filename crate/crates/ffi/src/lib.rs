//! C ABI over `tsproto`.
//!
//! Every fallible function returns a [`TsStatus`]. On failure a message is
//! kept per thread and can be read with [`ts_last_error_message`]. Objects
//! cross the boundary as opaque handles that must be released with the
//! matching `*_free` function.
//!
//! Array outputs follow one convention: the caller passes a buffer and its
//! capacity, the library writes the required length to `written` and returns
//! [`TsStatus::BufferTooSmall`] when the capacity is short. Passing a null
//! buffer with zero capacity is a size query.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use tsproto::io::{decode_pfs1, read_feature_set, write_feature_set, Precision};
use tsproto::pgm::{generate_prototypes, solve_pair_coefficients};
use tsproto::rdm::{group_operators, project_all, project_with_mode, robust_weight, robust_weights};
use tsproto::{generate_all_groups, Error, GroupKey, Hyperparams, PairedFeatureSet, PrototypeSet};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    BadMagic = 4,
    TruncatedPayload = 5,
    VersionUnsupported = 6,
    LengthMismatch = 7,
    Malformed = 8,
    InvalidFeatureSet = 9,
    ParseError = 10,
    Io = 11,
    DegenerateAtom = 12,
    DimensionMismatch = 13,
    EmptyGroup = 14,
    ComputeError = 15,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsProjectionMode {
    Greedy = 0,
    Joint = 1,
}

impl From<TsProjectionMode> for tsproto::ProjectionMode {
    fn from(m: TsProjectionMode) -> Self {
        match m {
            TsProjectionMode::Greedy => tsproto::ProjectionMode::Greedy,
            TsProjectionMode::Joint => tsproto::ProjectionMode::Joint,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TsGroupKey {
    pub class_id: u32,
    pub level_id: u32,
}

impl From<TsGroupKey> for GroupKey {
    fn from(g: TsGroupKey) -> Self {
        GroupKey::new(g.class_id, g.level_id)
    }
}

impl From<GroupKey> for TsGroupKey {
    fn from(g: GroupKey) -> Self {
        TsGroupKey {
            class_id: g.class_id,
            level_id: g.level_id,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TsFeatureSetInfo {
    pub records: usize,
    pub dim_t: usize,
    pub dim_s: usize,
    pub groups: usize,
    /// Logit length, or 0 when the set carries no logits.
    pub num_logits: usize,
}

/// Opaque paired feature set.
pub struct TsFeatureSet {
    inner: PairedFeatureSet,
}

/// Opaque prototype set for one group.
pub struct TsPrototypeSet {
    inner: PrototypeSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(TsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::BadMagic => TsStatus::BadMagic,
            Error::TruncatedPayload { .. } => TsStatus::TruncatedPayload,
            Error::VersionUnsupported(_) => TsStatus::VersionUnsupported,
            Error::LengthMismatch { .. } => TsStatus::LengthMismatch,
            Error::Malformed(_) => TsStatus::Malformed,
            Error::Invalid(_) => TsStatus::InvalidFeatureSet,
            Error::SchemaMismatch(_) | Error::Parse { .. } | Error::Csv(_) | Error::Json(_) | Error::Toml(_) => {
                TsStatus::ParseError
            }
            Error::Io(_) => TsStatus::Io,
            Error::DegenerateAtom { .. } => TsStatus::DegenerateAtom,
            Error::DimensionMismatch { .. } => TsStatus::DimensionMismatch,
            Error::EmptyGroup(_) => TsStatus::EmptyGroup,
            Error::InvalidConfig(_) => TsStatus::InvalidArgument,
            _ => TsStatus::ComputeError,
        };
        Failure(status, format!("{}: {e}", e.code()))
    }
}

type FfiResult = Result<(), Failure>;

fn fail<T>(status: TsStatus, msg: &str) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `body`, records any failure message and maps panics to
/// [`TsStatus::Panic`].
fn guard(body: impl FnOnce() -> FfiResult) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => TsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside tsproto".into());
            TsStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return fail(TsStatus::NullPointer, &format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    match ptr.as_ref() {
        Some(r) => Ok(r),
        None => fail(TsStatus::NullPointer, &format!("{what} is null")),
    }
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    match ptr.as_mut() {
        Some(r) => Ok(r),
        None => fail(TsStatus::NullPointer, &format!("{what} is null")),
    }
}

/// Copies `values` into the caller's buffer under the size-query convention.
unsafe fn copy_out<T: Copy>(values: &[T], out: *mut T, capacity: usize, written: *mut usize) -> FfiResult {
    let written = out_ref(written, "written")?;
    *written = values.len();
    if values.is_empty() {
        return Ok(());
    }
    if capacity < values.len() {
        return fail(
            TsStatus::BufferTooSmall,
            &format!("buffer holds {capacity}, need {}", values.len()),
        );
    }
    if out.is_null() {
        return fail(TsStatus::NullPointer, "output buffer is null");
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn path_in<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return fail(TsStatus::NullPointer, "path is null");
    }
    match CStr::from_ptr(path).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => fail(TsStatus::InvalidArgument, "path is not valid UTF-8"),
    }
}

fn hyper(k: usize, lambda: f64) -> Result<Hyperparams, Failure> {
    let h = Hyperparams {
        k,
        lambda,
        ..Hyperparams::default()
    };
    h.check()?;
    Ok(h)
}

fn store<T>(out: &mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on the calling thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Decodes a PFS1 buffer and validates it.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_from_pfs1(data: *const u8, len: usize, out: *mut *mut TsFeatureSet) -> TsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let set = decode_pfs1(slice_in(data, len, "data")?)?;
        set.ensure_valid()?;
        store(out, TsFeatureSet { inner: set });
        Ok(())
    })
}

/// Reads a feature set from `path` (`.csv` or PFS1) and validates it.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_read(path: *const c_char, out: *mut *mut TsFeatureSet) -> TsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let set = read_feature_set(path_in(path)?)?;
        set.ensure_valid()?;
        store(out, TsFeatureSet { inner: set });
        Ok(())
    })
}

/// Writes `set` to `path`, as CSV when the extension is `.csv` and as PFS1
/// otherwise.
///
/// # Safety
/// `set` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_write(set: *const TsFeatureSet, path: *const c_char, use_f32: bool) -> TsStatus {
    guard(|| {
        let set = handle(set, "set")?;
        let precision = if use_f32 { Precision::F32 } else { Precision::F64 };
        write_feature_set(path_in(path)?, &set.inner, precision)?;
        Ok(())
    })
}

/// # Safety
/// `set` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_info(set: *const TsFeatureSet, info: *mut TsFeatureSetInfo) -> TsStatus {
    guard(|| {
        let set = &handle(set, "set")?.inner;
        *out_ref(info, "info")? = TsFeatureSetInfo {
            records: set.len(),
            dim_t: set.dim_t,
            dim_s: set.dim_s,
            groups: set.groups().len(),
            num_logits: set.num_logits().unwrap_or(0),
        };
        Ok(())
    })
}

/// Groups present in `set`, in ascending order.
///
/// # Safety
/// `set` must be a live handle; `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_groups(
    set: *const TsFeatureSet,
    out: *mut TsGroupKey,
    capacity: usize,
    written: *mut usize,
) -> TsStatus {
    guard(|| {
        let groups: Vec<TsGroupKey> = handle(set, "set")?.inner.groups().into_iter().map(Into::into).collect();
        copy_out(&groups, out, capacity, written)
    })
}

/// # Safety
/// `set` must be null or a handle returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ts_feature_set_free(set: *mut TsFeatureSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Coupled coefficient solve for one residual pair against one atom pair.
///
/// # Safety
/// `r_t`, `g_t` must hold `dim_t` values; `r_s`, `g_s` must hold `dim_s`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ts_solve_pair_coefficients(
    r_t: *const f64,
    g_t: *const f64,
    dim_t: usize,
    r_s: *const f64,
    g_s: *const f64,
    dim_s: usize,
    lambda: f64,
    w_t: *mut f64,
    w_s: *mut f64,
) -> TsStatus {
    guard(|| {
        let (a, b) = solve_pair_coefficients(
            slice_in(r_t, dim_t, "r_t")?,
            slice_in(r_s, dim_s, "r_s")?,
            slice_in(g_t, dim_t, "g_t")?,
            slice_in(g_s, dim_s, "g_s")?,
            lambda,
        )?;
        *out_ref(w_t, "w_t")? = a;
        *out_ref(w_s, "w_s")? = b;
        Ok(())
    })
}

/// Greedy prototype selection for one group.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_prototypes_generate(
    set: *const TsFeatureSet,
    group: TsGroupKey,
    k: usize,
    lambda: f64,
    out: *mut *mut TsPrototypeSet,
) -> TsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let set = &handle(set, "set")?.inner;
        let protos = generate_prototypes(set, group.into(), &hyper(k, lambda)?)?;
        store(out, TsPrototypeSet { inner: protos });
        Ok(())
    })
}

/// Selected instance ids in selection order.
///
/// # Safety
/// `protos` must be a live handle; `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ts_prototypes_indices(
    protos: *const TsPrototypeSet,
    out: *mut u64,
    capacity: usize,
    written: *mut usize,
) -> TsStatus {
    guard(|| copy_out(&handle(protos, "protos")?.inner.indices, out, capacity, written))
}

/// Joint objective before selection followed by its value after each step.
///
/// # Safety
/// `protos` must be a live handle; `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ts_prototypes_objectives(
    protos: *const TsPrototypeSet,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> TsStatus {
    guard(|| {
        let p = &handle(protos, "protos")?.inner;
        let mut values = vec![p.initial_objective];
        values.extend(&p.objectives);
        copy_out(&values, out, capacity, written)
    })
}

/// Whether the group held fewer instances than requested.
///
/// # Safety
/// `protos` must be a live handle and `capped` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_prototypes_capped(protos: *const TsPrototypeSet, capped: *mut bool) -> TsStatus {
    guard(|| {
        *out_ref(capped, "capped")? = handle(protos, "protos")?.inner.capped;
        Ok(())
    })
}

/// Projects one feature pair onto the prototypes. Both coefficient buffers
/// receive one value per prototype; `sigma` receives the robustness weight.
///
/// # Safety
/// `protos` must be a live handle; `f_t` and `f_s` must hold `dim_t` and
/// `dim_s` values; both coefficient buffers must hold `capacity` entries.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ts_prototypes_project(
    protos: *const TsPrototypeSet,
    f_t: *const f64,
    dim_t: usize,
    f_s: *const f64,
    dim_s: usize,
    lambda: f64,
    mode: TsProjectionMode,
    lambda_t: *mut f64,
    lambda_s: *mut f64,
    capacity: usize,
    written: *mut usize,
    sigma: *mut f64,
) -> TsStatus {
    guard(|| {
        let p = &handle(protos, "protos")?.inner;
        let pair = project_with_mode(
            slice_in(f_t, dim_t, "f_t")?,
            slice_in(f_s, dim_s, "f_s")?,
            p,
            lambda,
            mode.into(),
        )?;
        copy_out(&pair.lambda_t, lambda_t, capacity, written)?;
        copy_out(&pair.lambda_s, lambda_s, capacity, written)?;
        if !sigma.is_null() {
            *sigma = robust_weight(&pair).sigma;
        }
        Ok(())
    })
}

/// # Safety
/// `protos` must be null or a handle returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn ts_prototypes_free(protos: *mut TsPrototypeSet) {
    if !protos.is_null() {
        drop(Box::from_raw(protos));
    }
}

/// Robustness weight of every record, in record order, with prototypes
/// generated per group from `set` itself.
///
/// # Safety
/// `set` must be a live handle; `out` must hold `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn ts_robust_weights(
    set: *const TsFeatureSet,
    k: usize,
    lambda: f64,
    mode: TsProjectionMode,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> TsStatus {
    guard(|| {
        let set = &handle(set, "set")?.inner;
        let h = hyper(k, lambda)?;
        let protos = generate_all_groups(set, &h)?;
        let ops = group_operators(set, &protos, lambda, mode.into())?;
        let sigma = robust_weights(&project_all(set, &ops)?, true);
        copy_out(&sigma, out, capacity, written)
    })
}

//! C ABI over `ecoattn`.
//!
//! Matrices and attention specs cross the boundary as opaque handles created
//! by `eco_*_new` and released by `eco_*_free`. Every fallible call returns an
//! [`EcoStatus`]; on failure a message is kept per thread and can be copied out
//! with [`eco_last_error_message`]. Panics are caught and reported as
//! `ECO_STATUS_PANIC`.
//!
//! Matrix data is row-major `double`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ecoattn::attention::{attention_forward, kernel_crossing_lambda, kernel_weight, score_matrix, Mask};
use ecoattn::grad::attention_backward;
use ecoattn::ops::{energy_estimate, reduction_report, score_op_counts, EnergyModel, OpTally};
use ecoattn::sparse::{linformer_l1_forward, longformer_l1_forward, ProjectionSpec, WindowSpec};
use ecoattn::tensor::{rand_matrix, Matrix, Rng};
use ecoattn::{dot_equivalence_check, AttentionSpec, Error, ScoreKind};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcoStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    InvalidParameter = 3,
    Domain = 4,
    DegenerateRow = 5,
    Config = 6,
    NonFinite = 7,
    Parse = 8,
    DegenerateModel = 9,
    Panic = 10,
    Internal = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcoScoreKind {
    Dot = 0,
    L1 = 1,
    SquaredL2 = 2,
    /// General Lp distance; the exponent is passed separately.
    Lp = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EcoOpTally {
    pub mults: u64,
    pub adds: u64,
    pub abs_diffs: u64,
    pub exps: u64,
    pub divs: u64,
}

/// Picojoules per operation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcoEnergyModel {
    pub pj_mult: f64,
    pub pj_add: f64,
    pub pj_abs_diff: f64,
    pub pj_exp: f64,
    pub pj_div: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcoReductionReport {
    pub n: usize,
    pub d_k: usize,
    pub dot_pj: f64,
    pub l1_pj: f64,
    pub reduction_fraction: f64,
    pub mult_add_ratio: f64,
}

/// Opaque row-major matrix of doubles.
pub struct EcoMatrix {
    inner: Matrix,
}

/// Opaque attention configuration: score kind, λ, key dimension, optional mask.
pub struct EcoAttentionSpec {
    inner: AttentionSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EcoStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension { .. } => EcoStatus::Dimension,
            Error::Parameter(_) => EcoStatus::InvalidParameter,
            Error::Domain(_) => EcoStatus::Domain,
            Error::DegenerateRow { .. } => EcoStatus::DegenerateRow,
            Error::Config(_) => EcoStatus::Config,
            Error::NonFinite(_) => EcoStatus::NonFinite,
            Error::Parse(_) => EcoStatus::Parse,
            Error::DegenerateModel(_) => EcoStatus::DegenerateModel,
            Error::Oracle(_) | Error::Diverged { .. } => EcoStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EcoStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EcoStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            EcoStatus::Panic
        }
    }
}

unsafe fn matrix_ref<'a>(m: *const EcoMatrix, what: &str) -> Result<&'a Matrix, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null(what))
}

unsafe fn spec_ref<'a>(s: *const EcoAttentionSpec) -> Result<&'a AttentionSpec, Failure> {
    s.as_ref().map(|s| &s.inner).ok_or_else(|| null("spec"))
}

unsafe fn put_matrix(out: *mut *mut EcoMatrix, m: Matrix) {
    *out = Box::into_raw(Box::new(EcoMatrix { inner: m }));
}

fn to_kind(kind: EcoScoreKind, p: f64) -> ScoreKind {
    match kind {
        EcoScoreKind::Dot => ScoreKind::DotProduct,
        EcoScoreKind::L1 => ScoreKind::L1,
        EcoScoreKind::SquaredL2 => ScoreKind::SquaredL2,
        EcoScoreKind::Lp => ScoreKind::Lp(p),
    }
}

fn to_tally(t: OpTally) -> EcoOpTally {
    EcoOpTally {
        mults: t.mults,
        adds: t.adds,
        abs_diffs: t.abs_diffs,
        exps: t.exps,
        divs: t.divs,
    }
}

fn from_tally(t: &EcoOpTally) -> OpTally {
    OpTally {
        mults: t.mults,
        adds: t.adds,
        abs_diffs: t.abs_diffs,
        exps: t.exps,
        divs: t.divs,
    }
}

fn from_model(m: &EcoEnergyModel) -> EnergyModel {
    EnergyModel {
        pj_mult: m.pj_mult,
        pj_add: m.pj_add,
        pj_abs_diff: m.pj_abs_diff,
        pj_exp: m.pj_exp,
        pj_div: m.pj_div,
    }
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length including the NUL,
/// or 0 when the last call succeeded.
#[no_mangle]
pub unsafe extern "C" fn eco_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Creates a `rows × cols` matrix from `rows * cols` row-major values, or a
/// zero matrix when `data` is null.
#[no_mangle]
pub unsafe extern "C" fn eco_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut EcoMatrix) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = if data.is_null() {
            Matrix::zeros(rows, cols)
        } else {
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| Failure(EcoStatus::InvalidParameter, "rows * cols overflows".into()))?;
            Matrix::from_vec(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?
        };
        put_matrix(out, m);
        Ok(())
    })
}

/// Uniform entries in `[-scale, scale)` drawn from the library's seeded generator.
#[no_mangle]
pub unsafe extern "C" fn eco_matrix_random(
    rows: usize,
    cols: usize,
    seed: u64,
    scale: f64,
    out: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        put_matrix(out, rand_matrix(&mut Rng::new(seed), rows, cols, scale)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eco_matrix_free(m: *mut EcoMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Row count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn eco_matrix_rows(m: *const EcoMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.rows())
}

/// Column count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn eco_matrix_cols(m: *const EcoMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.inner.cols())
}

/// Copies the row-major values into `buf`, which must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn eco_matrix_copy_data(m: *const EcoMatrix, buf: *mut f64, len: usize) -> EcoStatus {
    guard(|| {
        let m = matrix_ref(m, "matrix")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = m.data();
        if len < data.len() {
            return Err(Failure(
                EcoStatus::Dimension,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// `p` is read only for `ECO_SCORE_KIND_LP`.
#[no_mangle]
pub unsafe extern "C" fn eco_spec_new(
    kind: EcoScoreKind,
    p: f64,
    lambda: f64,
    d_k: usize,
    out: *mut *mut EcoAttentionSpec,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = AttentionSpec::new(to_kind(kind, p), lambda, d_k)?;
        *out = Box::into_raw(Box::new(EcoAttentionSpec { inner }));
        Ok(())
    })
}

/// Sets a `rows × cols` row-major mask; nonzero bytes allow attention.
/// Passing null `allowed` clears the mask.
#[no_mangle]
pub unsafe extern "C" fn eco_spec_set_mask(
    spec: *mut EcoAttentionSpec,
    allowed: *const u8,
    rows: usize,
    cols: usize,
) -> EcoStatus {
    guard(|| {
        let spec = spec.as_mut().ok_or_else(|| null("spec"))?;
        if allowed.is_null() {
            spec.inner.mask = None;
            return Ok(());
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(EcoStatus::InvalidParameter, "rows * cols overflows".into()))?;
        let bits = std::slice::from_raw_parts(allowed, len).iter().map(|&b| b != 0).collect();
        spec.inner.mask = Some(Mask::new(rows, cols, bits)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eco_spec_free(spec: *mut EcoAttentionSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Pre-softmax scores `S` (`n_q × n_k`).
#[no_mangle]
pub unsafe extern "C" fn eco_score_matrix(
    spec: *const EcoAttentionSpec,
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    out: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = score_matrix(spec_ref(spec)?, matrix_ref(q, "q")?, matrix_ref(k, "k")?)?;
        put_matrix(out, s);
        Ok(())
    })
}

/// Output `O = softmax(S)·V`; `out_alpha` may be null.
#[no_mangle]
pub unsafe extern "C" fn eco_attention_forward(
    spec: *const EcoAttentionSpec,
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    v: *const EcoMatrix,
    out_o: *mut *mut EcoMatrix,
    out_alpha: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out_o.is_null() {
            return Err(null("out_o"));
        }
        let r = attention_forward(spec_ref(spec)?, matrix_ref(q, "q")?, matrix_ref(k, "k")?, matrix_ref(v, "v")?)?;
        put_matrix(out_o, r.o);
        if !out_alpha.is_null() {
            put_matrix(out_alpha, r.alpha);
        }
        Ok(())
    })
}

/// Sliding-window attention of even width `window` plus `n_globals` global token indices.
#[no_mangle]
pub unsafe extern "C" fn eco_longformer_forward(
    spec: *const EcoAttentionSpec,
    window: usize,
    globals: *const usize,
    n_globals: usize,
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    v: *const EcoMatrix,
    out: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = if n_globals == 0 {
            Vec::new()
        } else if globals.is_null() {
            return Err(null("globals"));
        } else {
            std::slice::from_raw_parts(globals, n_globals).to_vec()
        };
        let win = WindowSpec::new(window, g)?;
        let o = longformer_l1_forward(spec_ref(spec)?, &win, matrix_ref(q, "q")?, matrix_ref(k, "k")?, matrix_ref(v, "v")?)?;
        put_matrix(out, o);
        Ok(())
    })
}

/// Attention against `E_K·K` and `E_V·V`; both projections are `k × N`.
#[no_mangle]
pub unsafe extern "C" fn eco_linformer_forward(
    spec: *const EcoAttentionSpec,
    e_k: *const EcoMatrix,
    e_v: *const EcoMatrix,
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    v: *const EcoMatrix,
    out: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let proj = ProjectionSpec::new(matrix_ref(e_k, "e_k")?.clone(), matrix_ref(e_v, "e_v")?.clone())?;
        let o = linformer_l1_forward(spec_ref(spec)?, &proj, matrix_ref(q, "q")?, matrix_ref(k, "k")?, matrix_ref(v, "v")?)?;
        put_matrix(out, o);
        Ok(())
    })
}

/// Gradients of `sum(upstream ⊙ O)` with respect to Q, K and V.
#[no_mangle]
pub unsafe extern "C" fn eco_attention_backward(
    spec: *const EcoAttentionSpec,
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    v: *const EcoMatrix,
    upstream: *const EcoMatrix,
    out_dq: *mut *mut EcoMatrix,
    out_dk: *mut *mut EcoMatrix,
    out_dv: *mut *mut EcoMatrix,
) -> EcoStatus {
    guard(|| {
        if out_dq.is_null() || out_dk.is_null() || out_dv.is_null() {
            return Err(null("gradient output"));
        }
        let g = attention_backward(
            spec_ref(spec)?,
            matrix_ref(q, "q")?,
            matrix_ref(k, "k")?,
            matrix_ref(v, "v")?,
            matrix_ref(upstream, "upstream")?,
        )?;
        put_matrix(out_dq, g.d_q);
        put_matrix(out_dk, g.d_k);
        put_matrix(out_dv, g.d_v);
        Ok(())
    })
}

/// Max absolute deviation between squared-L2 attention (λ = ½) and dot-product
/// attention on row-normalised Q and K.
#[no_mangle]
pub unsafe extern "C" fn eco_dot_equivalence_check(
    q: *const EcoMatrix,
    k: *const EcoMatrix,
    v: *const EcoMatrix,
    out_deviation: *mut f64,
) -> EcoStatus {
    guard(|| {
        if out_deviation.is_null() {
            return Err(null("out_deviation"));
        }
        *out_deviation = dot_equivalence_check(matrix_ref(q, "q")?, matrix_ref(k, "k")?, matrix_ref(v, "v")?)?;
        Ok(())
    })
}

/// Per-dimension kernel weight at difference `d`; NaN for invalid arguments.
#[no_mangle]
pub extern "C" fn eco_kernel_weight(kind: EcoScoreKind, p: f64, lambda: f64, d_k: usize, d: f64) -> f64 {
    let kind = to_kind(kind, p);
    if d_k == 0 || kind.validate().is_err() || !lambda.is_finite() || lambda < 0.0 {
        return f64::NAN;
    }
    catch_unwind(|| kernel_weight(kind, lambda, d_k, d)).unwrap_or(f64::NAN)
}

/// λ at which the Laplacian kernel meets the Gaussian at its inflection point; NaN for `d_k == 0`.
#[no_mangle]
pub extern "C" fn eco_kernel_crossing_lambda(d_k: usize) -> f64 {
    if d_k == 0 {
        return f64::NAN;
    }
    kernel_crossing_lambda(d_k)
}

/// Closed-form tally of one `n_q × n_k` score matrix.
#[no_mangle]
pub unsafe extern "C" fn eco_score_op_counts(
    kind: EcoScoreKind,
    p: f64,
    n_q: usize,
    n_k: usize,
    d_k: usize,
    out: *mut EcoOpTally,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = to_kind(kind, p);
        kind.validate()?;
        *out = to_tally(score_op_counts(kind, n_q, n_k, d_k));
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn eco_energy_model_default() -> EcoEnergyModel {
    let m = EnergyModel::default();
    EcoEnergyModel {
        pj_mult: m.pj_mult,
        pj_add: m.pj_add,
        pj_abs_diff: m.pj_abs_diff,
        pj_exp: m.pj_exp,
        pj_div: m.pj_div,
    }
}

#[no_mangle]
pub unsafe extern "C" fn eco_energy_estimate(
    tally: *const EcoOpTally,
    model: *const EcoEnergyModel,
    out_pj: *mut f64,
) -> EcoStatus {
    guard(|| {
        let tally = tally.as_ref().ok_or_else(|| null("tally"))?;
        let model = from_model(model.as_ref().ok_or_else(|| null("model"))?);
        if out_pj.is_null() {
            return Err(null("out_pj"));
        }
        model.validate()?;
        *out_pj = energy_estimate(&from_tally(tally), &model);
        Ok(())
    })
}

/// Dot-product vs L1 score energy for `n` tokens. A null `model` uses the defaults.
#[no_mangle]
pub unsafe extern "C" fn eco_reduction_report(
    n: usize,
    d_k: usize,
    model: *const EcoEnergyModel,
    out: *mut EcoReductionReport,
) -> EcoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = model.as_ref().map(from_model).unwrap_or_default();
        let r = reduction_report(n, d_k, &model)?;
        *out = EcoReductionReport {
            n: r.n,
            d_k: r.d_k,
            dot_pj: r.dot_pj,
            l1_pj: r.l1_pj,
            reduction_fraction: r.reduction_fraction,
            mult_add_ratio: r.mult_add_ratio,
        };
        Ok(())
    })
}

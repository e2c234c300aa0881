use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ecoattn::attention::{attention_forward, kernel_weight};
use ecoattn::grad::attention_backward;
use ecoattn::tensor::{rand_matrix, Matrix, Rng};
use ecoattn::{AttentionSpec, ScoreKind};
use ecoattn_ffi::*;

struct Owned(*mut EcoMatrix);

impl Drop for Owned {
    fn drop(&mut self) {
        unsafe { eco_matrix_free(self.0) }
    }
}

fn upload(m: &Matrix) -> Owned {
    let mut out = ptr::null_mut();
    let st = unsafe { eco_matrix_new(m.rows(), m.cols(), m.data().as_ptr(), &mut out) };
    assert_eq!(st, EcoStatus::Ok);
    Owned(out)
}

fn download(m: *const EcoMatrix) -> Matrix {
    unsafe {
        let (r, c) = (eco_matrix_rows(m), eco_matrix_cols(m));
        let mut buf = vec![0.0; r * c];
        assert_eq!(eco_matrix_copy_data(m, buf.as_mut_ptr(), buf.len()), EcoStatus::Ok);
        Matrix::from_vec(r, c, buf).unwrap()
    }
}

fn spec(kind: EcoScoreKind, lambda: f64, d_k: usize) -> *mut EcoAttentionSpec {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { eco_spec_new(kind, 3.0, lambda, d_k, &mut out) }, EcoStatus::Ok);
    out
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { eco_last_error_message(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { std::ffi::CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn qkv(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
    let mut rng = Rng::new(seed);
    (
        rand_matrix(&mut rng, n, d, 1.0).unwrap(),
        rand_matrix(&mut rng, n, d, 1.0).unwrap(),
        rand_matrix(&mut rng, n, d, 1.0).unwrap(),
    )
}

#[test]
fn forward_matches_library_for_every_kind() {
    let (q, k, v) = qkv(1, 5, 3);
    let (hq, hk, hv) = (upload(&q), upload(&k), upload(&v));
    for (ek, kind) in [
        (EcoScoreKind::Dot, ScoreKind::DotProduct),
        (EcoScoreKind::L1, ScoreKind::L1),
        (EcoScoreKind::SquaredL2, ScoreKind::SquaredL2),
        (EcoScoreKind::Lp, ScoreKind::Lp(3.0)),
    ] {
        let s = spec(ek, 1.5, 3);
        let (mut o, mut a) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(unsafe { eco_attention_forward(s, hq.0, hk.0, hv.0, &mut o, &mut a) }, EcoStatus::Ok);
        let (o, a) = (Owned(o), Owned(a));
        let expected = attention_forward(&AttentionSpec::new(kind, 1.5, 3).unwrap(), &q, &k, &v).unwrap();
        assert_eq!(download(o.0), expected.o);
        assert_eq!(download(a.0), expected.alpha);
        unsafe { eco_spec_free(s) };
    }
}

#[test]
fn backward_matches_library() {
    let (q, k, v) = qkv(2, 4, 2);
    let up = Matrix::filled(4, 2, 0.5);
    let s = spec(EcoScoreKind::L1, 1.0, 2);
    let (hq, hk, hv, hu) = (upload(&q), upload(&k), upload(&v), upload(&up));
    let (mut dq, mut dk, mut dv) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    let st = unsafe { eco_attention_backward(s, hq.0, hk.0, hv.0, hu.0, &mut dq, &mut dk, &mut dv) };
    assert_eq!(st, EcoStatus::Ok);
    let (dq, dk, dv) = (Owned(dq), Owned(dk), Owned(dv));
    let g = attention_backward(&AttentionSpec::l1(1.0, 2).unwrap(), &q, &k, &v, &up).unwrap();
    assert_eq!(download(dq.0), g.d_q);
    assert_eq!(download(dk.0), g.d_k);
    assert_eq!(download(dv.0), g.d_v);
    unsafe { eco_spec_free(s) };
}

#[test]
fn sparse_variants_reduce_to_dense() {
    let (q, k, v) = qkv(3, 6, 3);
    let s = spec(EcoScoreKind::L1, 1.0, 3);
    let (hq, hk, hv) = (upload(&q), upload(&k), upload(&v));
    let mut dense = ptr::null_mut();
    unsafe { eco_attention_forward(s, hq.0, hk.0, hv.0, &mut dense, ptr::null_mut()) };
    let dense = Owned(dense);

    let mut lf = ptr::null_mut();
    assert_eq!(unsafe { eco_longformer_forward(s, 12, ptr::null(), 0, hq.0, hk.0, hv.0, &mut lf) }, EcoStatus::Ok);
    let lf = Owned(lf);
    assert!(download(lf.0).max_abs_diff(&download(dense.0)).unwrap() < 1e-12);

    let eye = upload(&Matrix::identity(6));
    let mut li = ptr::null_mut();
    assert_eq!(unsafe { eco_linformer_forward(s, eye.0, eye.0, hq.0, hk.0, hv.0, &mut li) }, EcoStatus::Ok);
    let li = Owned(li);
    assert!(download(li.0).max_abs_diff(&download(dense.0)).unwrap() < 1e-12);

    let mut odd = ptr::null_mut();
    let st = unsafe { eco_longformer_forward(s, 3, ptr::null(), 0, hq.0, hk.0, hv.0, &mut odd) };
    assert_eq!(st, EcoStatus::Config);
    assert!(odd.is_null());
    assert!(!last_error().is_empty());
    unsafe { eco_spec_free(s) };
}

#[test]
fn mask_and_scores() {
    let (q, k, _) = qkv(4, 3, 2);
    let s = spec(EcoScoreKind::Dot, 1.0, 2);
    let causal = [1u8, 0, 0, 1, 1, 0, 1, 1, 1];
    assert_eq!(unsafe { eco_spec_set_mask(s, causal.as_ptr(), 3, 3) }, EcoStatus::Ok);
    let (hq, hk) = (upload(&q), upload(&k));
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { eco_score_matrix(s, hq.0, hk.0, &mut out) }, EcoStatus::Ok);
    let scores = download(Owned(out).0);
    assert_eq!(scores.get(0, 1), f64::MIN);
    assert!((scores.get(1, 0) - q.row(1).iter().zip(k.row(0)).map(|(a, b)| a * b).sum::<f64>() / 2f64.sqrt()).abs() < 1e-15);

    let empty_row = [0u8, 0, 0, 1, 1, 1, 1, 1, 1];
    assert_eq!(unsafe { eco_spec_set_mask(s, empty_row.as_ptr(), 3, 3) }, EcoStatus::Config);
    assert_eq!(unsafe { eco_spec_set_mask(s, ptr::null(), 0, 0) }, EcoStatus::Ok);
    unsafe { eco_spec_free(s) };
}

#[test]
fn errors_and_null_handles() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { eco_matrix_new(2, 2, ptr::null(), ptr::null_mut()) }, EcoStatus::NullPointer);
    let nan = [f64::NAN, 0.0];
    assert_eq!(unsafe { eco_matrix_new(1, 2, nan.as_ptr(), &mut out) }, EcoStatus::NonFinite);
    assert!(last_error().contains("non-finite"));
    assert!(out.is_null());
    assert_eq!(unsafe { eco_matrix_new(2, 2, ptr::null(), &mut out) }, EcoStatus::Ok);
    assert_eq!(last_error(), "");
    let z = Owned(out);
    assert_eq!(download(z.0), Matrix::zeros(2, 2));

    let mut small = [0.0; 3];
    assert_eq!(unsafe { eco_matrix_copy_data(z.0, small.as_mut_ptr(), 3) }, EcoStatus::Dimension);
    assert_eq!(unsafe { eco_matrix_rows(ptr::null()) }, 0);

    let mut sp = ptr::null_mut();
    assert_eq!(unsafe { eco_spec_new(EcoScoreKind::Lp, 0.5, 1.0, 2, &mut sp) }, EcoStatus::InvalidParameter);
    let s = spec(EcoScoreKind::L1, 1.0, 3);
    let mut o = ptr::null_mut();
    assert_eq!(unsafe { eco_attention_forward(s, z.0, z.0, z.0, &mut o, ptr::null_mut()) }, EcoStatus::Dimension);
    assert_eq!(unsafe { eco_attention_forward(ptr::null(), z.0, z.0, z.0, &mut o, ptr::null_mut()) }, EcoStatus::NullPointer);
    unsafe {
        eco_spec_free(s);
        eco_matrix_free(ptr::null_mut());
        eco_spec_free(ptr::null_mut());
    }
}

#[test]
fn equivalence_random_and_kernels() {
    let mut m = [ptr::null_mut(); 3];
    for (i, slot) in m.iter_mut().enumerate() {
        assert_eq!(unsafe { eco_matrix_random(5, 4, 10 + i as u64, 1.0, slot) }, EcoStatus::Ok);
    }
    let hs: Vec<Owned> = m.into_iter().map(Owned).collect();
    assert_eq!(download(hs[0].0), rand_matrix(&mut Rng::new(10), 5, 4, 1.0).unwrap());
    let mut dev = f64::NAN;
    assert_eq!(unsafe { eco_dot_equivalence_check(hs[0].0, hs[1].0, hs[2].0, &mut dev) }, EcoStatus::Ok);
    assert!(dev < 1e-10);

    for dk in [1usize, 4, 16, 64, 256] {
        let lam = eco_kernel_crossing_lambda(dk);
        let d = (dk as f64).powf(0.25);
        let g = eco_kernel_weight(EcoScoreKind::SquaredL2, 0.0, 1.0, dk, d);
        let l = eco_kernel_weight(EcoScoreKind::L1, 0.0, lam, dk, d);
        assert!((g - l).abs() < 1e-12);
        assert_eq!(l, kernel_weight(ScoreKind::L1, lam, dk, d));
    }
    assert!(eco_kernel_crossing_lambda(0).is_nan());
    assert!(eco_kernel_weight(EcoScoreKind::Lp, 0.2, 1.0, 4, 1.0).is_nan());
}

#[test]
fn accounting() {
    let mut t = EcoOpTally::default();
    assert_eq!(unsafe { eco_score_op_counts(EcoScoreKind::Dot, 0.0, 1024, 1024, 512, &mut t) }, EcoStatus::Ok);
    assert_eq!(t.mults, 536_870_912);
    assert_eq!(t.adds, 536_870_912);
    let model = eco_energy_model_default();
    let mut pj = 0.0;
    assert_eq!(unsafe { eco_energy_estimate(&t, &model, &mut pj) }, EcoStatus::Ok);
    assert!((pj - 536_870_912.0 * 4.6).abs() < 1e-3);

    let mut r = EcoReductionReport { n: 0, d_k: 0, dot_pj: 0.0, l1_pj: 0.0, reduction_fraction: 0.0, mult_add_ratio: 0.0 };
    assert_eq!(unsafe { eco_reduction_report(2048, 128, ptr::null(), &mut r) }, EcoStatus::Ok);
    assert!((r.reduction_fraction - 0.6087).abs() < 1e-4);
    assert!((r.mult_add_ratio - 4.111).abs() < 1e-3);

    let zero_add = EcoEnergyModel { pj_add: 0.0, ..model };
    assert_eq!(unsafe { eco_reduction_report(8, 8, &zero_add, &mut r) }, EcoStatus::DegenerateModel);
    let negative = EcoEnergyModel { pj_mult: -1.0, ..model };
    assert_eq!(unsafe { eco_energy_estimate(&t, &negative, &mut pj) }, EcoStatus::InvalidParameter);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ecoattn.h")).unwrap();
    for sym in [
        "typedef struct EcoMatrix EcoMatrix;",
        "typedef struct EcoAttentionSpec EcoAttentionSpec;",
        "ECO_STATUS_NULL_POINTER = 1",
        "eco_attention_forward(",
        "eco_attention_backward(",
        "eco_longformer_forward(",
        "eco_linformer_forward(",
        "eco_reduction_report(",
        "eco_last_error_message(",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

/// Compiles and runs a C program against the generated header and static library.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libecoattn_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let bin = profile_dir.join(format!("ecoattn-ffi-smoke-{}", std::process::id()));
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    let _ = std::fs::remove_file(&bin);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}

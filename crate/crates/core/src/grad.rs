//! Hand-derived attention gradients and a central finite-difference oracle.
//!
//! With `S = coef · R(Q, K)`, `α = softmax_rows(S)` and `O = α V`, the
//! backward pass for upstream `G = ∂ℓ/∂O` is
//!
//! ```text
//! dV  = αᵀ G
//! dα  = G Vᵀ
//! dS  = α ⊙ (dα − rowsum(α ⊙ dα))
//! dR  = coef · dS
//! ```
//!
//! followed by the pairwise derivative of `R` for each score kind. `sign(0)`
//! is taken as 0, so L1 kink points get the zero subgradient.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, AttentionSpec, ScoreKind};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, rand_matrix, Matrix, Rng};

/// Default central-difference step for double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Coordinates closer than this to an L1 kink are excluded from FD comparison.
pub const DEFAULT_KINK_MARGIN: f64 = 1e-3;

/// Gradients of a scalar loss with respect to the attention inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub d_q: Matrix,
    pub d_k: Matrix,
    pub d_v: Matrix,
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Backward of a row softmax: `dS = α ⊙ (dα − rowsum(α ⊙ dα))`.
pub fn softmax_rows_backward(alpha: &Matrix, d_alpha: &Matrix) -> Result<Matrix> {
    if alpha.shape() != d_alpha.shape() {
        return Err(Error::dim("softmax_rows_backward", alpha.shape(), d_alpha.shape()));
    }
    let mut ds = Matrix::zeros(alpha.rows(), alpha.cols());
    for i in 0..alpha.rows() {
        let a = alpha.row(i);
        let g = d_alpha.row(i);
        let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        for (o, (x, y)) in ds.row_mut(i).iter_mut().zip(a.iter().zip(g)) {
            *o = x * (y - inner);
        }
    }
    Ok(ds)
}

/// Backpropagates `d_raw = ∂ℓ/∂R` through the raw pairwise map of `kind`.
pub fn raw_scores_backward(kind: ScoreKind, q: &Matrix, k: &Matrix, d_raw: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_raw.shape() != (q.rows(), k.rows()) || q.cols() != k.cols() {
        return Err(Error::dim("raw_scores_backward", d_raw.shape(), (q.rows(), k.rows())));
    }
    if let ScoreKind::DotProduct = kind {
        return Ok((matmul(d_raw, k)?, matmul_tn(d_raw, q)?));
    }
    let d = q.cols();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dk = Matrix::zeros(k.rows(), d);
    let mut deriv = vec![0.0; d];
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            let g = d_raw.get(i, j);
            if g == 0.0 {
                continue;
            }
            let (qi, kj) = (q.row(i), k.row(j));
            match kind {
                ScoreKind::L1 => {
                    for m in 0..d {
                        deriv[m] = sign(qi[m] - kj[m]);
                    }
                }
                ScoreKind::SquaredL2 => {
                    for m in 0..d {
                        deriv[m] = 2.0 * (qi[m] - kj[m]);
                    }
                }
                ScoreKind::Lp(p) => {
                    let dist = qi
                        .iter()
                        .zip(kj)
                        .map(|(a, b)| (a - b).abs().powf(p))
                        .sum::<f64>()
                        .powf(1.0 / p);
                    if dist == 0.0 {
                        deriv.iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        let scale = dist.powf(1.0 - p);
                        for m in 0..d {
                            let x = qi[m] - kj[m];
                            deriv[m] = sign(x) * x.abs().powf(p - 1.0) * scale;
                        }
                    }
                }
                ScoreKind::DotProduct => unreachable!(),
            }
            for (m, dm) in deriv.iter().enumerate() {
                let c = g * dm;
                dq.row_mut(i)[m] += c;
                dk.row_mut(j)[m] -= c;
            }
        }
    }
    Ok((dq, dk))
}

/// Gradients of `⟨upstream, O⟩` with `O` from [`attention_forward`].
pub fn attention_backward(spec: &AttentionSpec, q: &Matrix, k: &Matrix, v: &Matrix, upstream: &Matrix) -> Result<AttentionGrads> {
    let fwd = attention_forward(spec, q, k, v)?;
    attention_backward_from_alpha(spec, q, k, v, &fwd.alpha, upstream)
}

/// Backward pass reusing the forward attention weights.
pub fn attention_backward_from_alpha(
    spec: &AttentionSpec,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    alpha: &Matrix,
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    if upstream.shape() != (q.rows(), v.cols()) {
        return Err(Error::dim("attention_backward: upstream", upstream.shape(), (q.rows(), v.cols())));
    }
    let d_v = matmul_tn(alpha, upstream)?;
    let d_alpha = matmul_nt(upstream, v)?;
    let mut d_raw = softmax_rows_backward(alpha, &d_alpha)?;
    let coef = spec.coefficient();
    d_raw.data_mut().iter_mut().for_each(|x| *x *= coef);
    let (d_q, d_k) = raw_scores_backward(spec.kind, q, k, &d_raw)?;
    Ok(AttentionGrads { d_q, d_k, d_v })
}

/// A single scalar coordinate of a named input tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_coordinate: Option<Coordinate>,
    pub step: f64,
    pub checked: usize,
    pub skipped: Vec<Coordinate>,
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// Relative error per coordinate is `|fd − analytic| / max(1, |analytic|)`.
/// Coordinates for which `skip(tensor_index, row, col)` returns true are
/// recorded in the report but not compared.
pub fn finite_difference_check<F, P>(
    f: F,
    inputs: &[(&str, &Matrix)],
    analytic: &[&Matrix],
    step: f64,
    skip: P,
) -> Result<FdReport>
where
    F: Fn(&[Matrix]) -> Result<f64>,
    P: Fn(usize, usize, usize) -> bool,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!("FD step must lie in [1e-7, 1e-3], got {step}")));
    }
    if inputs.len() != analytic.len() {
        return Err(Error::Parameter(format!(
            "{} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    for ((_, x), g) in inputs.iter().zip(analytic) {
        if x.shape() != g.shape() {
            return Err(Error::dim("finite_difference_check: gradient", x.shape(), g.shape()));
        }
    }
    let mut work: Vec<Matrix> = inputs.iter().map(|(_, m)| (*m).clone()).collect();
    let eval = |w: &[Matrix]| -> Result<f64> {
        let y = f(w)?;
        if !y.is_finite() {
            return Err(Error::Oracle(format!("objective evaluated to {y}")));
        }
        Ok(y)
    };
    eval(&work)?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        step,
        checked: 0,
        skipped: Vec::new(),
    };
    for t in 0..work.len() {
        let (rows, cols) = work[t].shape();
        for r in 0..rows {
            for c in 0..cols {
                let coord = || Coordinate {
                    tensor: inputs[t].0.to_string(),
                    row: r,
                    col: c,
                };
                if skip(t, r, c) {
                    report.skipped.push(coord());
                    continue;
                }
                let x0 = work[t].get(r, c);
                work[t].set(r, c, x0 + step);
                let fp = eval(&work)?;
                work[t].set(r, c, x0 - step);
                let fm = eval(&work)?;
                work[t].set(r, c, x0);
                let fd = (fp - fm) / (2.0 * step);
                let an = analytic[t].get(r, c);
                let rel = (fd - an).abs() / an.abs().max(1.0);
                report.checked += 1;
                if rel > report.max_rel_err || report.worst_coordinate.is_none() {
                    report.max_rel_err = rel;
                    report.worst_coordinate = Some(coord());
                }
            }
        }
    }
    Ok(report)
}

/// True when `(tensor, row, col)` of Q (tensor 0) or K (tensor 1) lies within
/// `margin` of an L1/Lp kink, i.e. some opposing coordinate is that close.
pub fn near_kink(q: &Matrix, k: &Matrix, tensor: usize, row: usize, col: usize, margin: f64) -> bool {
    match tensor {
        0 => (0..k.rows()).any(|j| (q.get(row, col) - k.get(j, col)).abs() < margin),
        1 => (0..q.rows()).any(|i| (q.get(i, col) - k.get(row, col)).abs() < margin),
        _ => false,
    }
}

/// Nudges entries of `q` until every `|q[i][m] − k[j][m]| ≥ margin`.
pub fn separate_from_kinks(q: &mut Matrix, k: &Matrix, margin: f64) {
    for i in 0..q.rows() {
        for m in 0..q.cols() {
            let mut x = q.get(i, m);
            // Each shift clears at least the offending key; n_k + 1 shifts always suffice.
            for _ in 0..=k.rows() {
                match (0..k.rows()).find(|&j| (x - k.get(j, m)).abs() < margin) {
                    Some(j) => x = k.get(j, m) + margin * 1.5,
                    None => break,
                }
            }
            q.set(i, m, x);
        }
    }
}

/// Serialised gradient-check result for one random attention instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub kind: ScoreKind,
    pub lambda: f64,
    pub n: usize,
    pub d_k: usize,
    pub max_rel_err: f64,
    pub worst_coordinate: Option<Coordinate>,
    pub step: f64,
    pub skipped_coordinates: usize,
}

/// Random attention instance for gradient checks: `(q, k, v, upstream)`.
/// Distance kinds with kinks get `q` separated from `k` by `DEFAULT_KINK_MARGIN`.
pub fn gradcheck_instance(kind: ScoreKind, n: usize, d_k: usize, seed: u64) -> Result<(Matrix, Matrix, Matrix, Matrix)> {
    let mut rng = Rng::new(seed);
    let mut q = rand_matrix(&mut rng, n, d_k, 1.0)?;
    let k = rand_matrix(&mut rng, n, d_k, 1.0)?;
    let v = rand_matrix(&mut rng, n, d_k, 1.0)?;
    let up = rand_matrix(&mut rng, n, d_k, 1.0)?;
    if matches!(kind, ScoreKind::L1 | ScoreKind::Lp(_)) {
        separate_from_kinks(&mut q, &k, DEFAULT_KINK_MARGIN);
    }
    Ok((q, k, v, up))
}

/// Runs the analytic-vs-FD comparison on an explicit instance.
pub fn gradcheck_on(spec: &AttentionSpec, q: &Matrix, k: &Matrix, v: &Matrix, upstream: &Matrix, step: f64) -> Result<FdReport> {
    let grads = attention_backward(spec, q, k, v, upstream)?;
    let loss = |w: &[Matrix]| -> Result<f64> { attention_forward(spec, &w[0], &w[1], &w[2])?.o.dot(upstream) };
    let kinked = matches!(spec.kind, ScoreKind::L1 | ScoreKind::Lp(_));
    finite_difference_check(
        loss,
        &[("q", q), ("k", k), ("v", v)],
        &[&grads.d_q, &grads.d_k, &grads.d_v],
        step,
        |t, r, c| kinked && near_kink(q, k, t, r, c, DEFAULT_KINK_MARGIN),
    )
}

/// Seeded end-to-end gradient check.
pub fn gradcheck(kind: ScoreKind, lambda: f64, n: usize, d_k: usize, seed: u64, step: f64) -> Result<GradcheckReport> {
    if n == 0 || d_k == 0 {
        return Err(Error::Parameter("gradcheck needs n >= 1 and d_k >= 1".into()));
    }
    let spec = AttentionSpec::new(kind, lambda, d_k)?;
    let (q, k, v, up) = gradcheck_instance(kind, n, d_k, seed)?;
    let fd = gradcheck_on(&spec, &q, &k, &v, &up, step)?;
    Ok(GradcheckReport {
        kind,
        lambda,
        n,
        d_k,
        max_rel_err: fd.max_rel_err,
        worst_coordinate: fd.worst_coordinate,
        step: fd.step,
        skipped_coordinates: fd.skipped.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (q, k, v, _) = gradcheck_instance(ScoreKind::L1, 4, 3, 1).unwrap();
        let spec = AttentionSpec::l1(2.0, 3).unwrap();
        let g = attention_backward(&spec, &q, &k, &v, &Matrix::zeros(4, 3)).unwrap();
        for m in [&g.d_q, &g.d_k, &g.d_v] {
            assert!(m.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_key_has_no_score_gradient() {
        let mut rng = Rng::new(2);
        let q = rand_matrix(&mut rng, 3, 4, 1.0).unwrap();
        let k = rand_matrix(&mut rng, 1, 4, 1.0).unwrap();
        let v = rand_matrix(&mut rng, 1, 2, 1.0).unwrap();
        let up = rand_matrix(&mut rng, 3, 2, 1.0).unwrap();
        for spec in [AttentionSpec::dot(4), AttentionSpec::l1(1.0, 4).unwrap()] {
            let g = attention_backward(&spec, &q, &k, &v, &up).unwrap();
            assert!(g.d_q.data().iter().all(|&x| x == 0.0));
            assert!(g.d_k.data().iter().all(|&x| x == 0.0));
            assert!(g.d_v.max_abs_diff(&up.column_means().scale(3.0)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn l1_matches_fd_on_reference_instance() {
        let (q, k, v, up) = gradcheck_instance(ScoreKind::L1, 5, 7, 17).unwrap();
        let spec = AttentionSpec::l1(2.0, 7).unwrap();
        let rep = gradcheck_on(&spec, &q, &k, &v, &up, 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{rep:?}");
        assert!(rep.skipped.is_empty());
    }

    #[test]
    fn quadratic_fd_is_exact() {
        let x = rand_matrix(&mut Rng::new(3), 3, 4, 2.0).unwrap();
        let f = |w: &[Matrix]| Ok(0.5 * w[0].dot(&w[0])?);
        let rep = finite_difference_check(f, &[("x", &x)], &[&x], 1e-5, |_, _, _| false).unwrap();
        assert!(rep.max_rel_err < 1e-9, "{rep:?}");
        assert_eq!(rep.checked, 12);
    }

    #[test]
    fn dot_product_self_check() {
        let r = gradcheck(ScoreKind::DotProduct, 1.0, 5, 4, 9, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn exact_kink_is_skipped() {
        let (mut q, k, v, up) = gradcheck_instance(ScoreKind::L1, 3, 2, 4).unwrap();
        q.set(1, 0, k.get(2, 0));
        let spec = AttentionSpec::l1(1.0, 2).unwrap();
        let rep = gradcheck_on(&spec, &q, &k, &v, &up, 1e-5).unwrap();
        assert!(rep.skipped.contains(&Coordinate { tensor: "q".into(), row: 1, col: 0 }));
        assert!(rep.skipped.contains(&Coordinate { tensor: "k".into(), row: 2, col: 0 }));
        assert!(rep.max_rel_err < 1e-5);
    }

    #[test]
    fn fd_rejects_bad_step_and_non_finite_objective() {
        let x = Matrix::zeros(1, 1);
        let ok = |w: &[Matrix]| Ok(w[0].get(0, 0));
        assert!(matches!(
            finite_difference_check(ok, &[("x", &x)], &[&x], 1e-2, |_, _, _| false),
            Err(Error::Parameter(_))
        ));
        let bad = |_: &[Matrix]| Ok(f64::NAN);
        assert!(matches!(
            finite_difference_check(bad, &[("x", &x)], &[&x], 1e-5, |_, _, _| false),
            Err(Error::Oracle(_))
        ));
    }

    #[test]
    fn separation_clears_every_pair() {
        let mut rng = Rng::new(5);
        let mut q = rand_matrix(&mut rng, 6, 5, 1.0).unwrap();
        let k = rand_matrix(&mut rng, 6, 5, 1.0).unwrap();
        q.set(0, 0, k.get(3, 0));
        separate_from_kinks(&mut q, &k, 1e-3);
        for i in 0..6 {
            for j in 0..6 {
                for m in 0..5 {
                    assert!((q.get(i, m) - k.get(j, m)).abs() >= 1e-3);
                }
            }
        }
    }

    #[test]
    fn report_serialises_with_expected_keys() {
        let r = gradcheck(ScoreKind::L1, 2.0, 3, 2, 1, 1e-5).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["kind", "lambda", "n", "d_k", "max_rel_err", "worst_coordinate", "step", "skipped_coordinates"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["kind"], "l1");
    }
}

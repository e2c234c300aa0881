//! Dense attention: score functions, forward pass, kernel curves and the
//! multi-head wrapper.
//!
//! Scores are computed as `S = coef · R` where `R` is the raw pairwise
//! quantity (`QKᵀ` for dot-product, a distance otherwise):
//!
//! | kind        | `R`                 | `S`               |
//! |-------------|---------------------|-------------------|
//! | DotProduct  | `⟨qᵢ, kⱼ⟩`          | `R / √Dk`         |
//! | L1          | `‖qᵢ − kⱼ‖₁`        | `−λ R / √Dk`      |
//! | SquaredL2   | `‖qᵢ − kⱼ‖₂²`       | `−λ R / √Dk`      |
//! | Lp(p)       | `‖qᵢ − kⱼ‖ₚ`        | `−λ R / √Dk`      |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{NoCount, OpSink, OpTally};
use crate::tensor::{l2_normalize_rows, matmul, softmax_in_place, Matrix};

/// Stand-in for −∞ on masked score entries. Finite, so max-subtraction never yields NaN.
pub const MASKED_SCORE: f64 = f64::MIN;

/// Pairwise score function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ScoreKind {
    DotProduct,
    L1,
    SquaredL2,
    Lp(f64),
}

impl ScoreKind {
    pub fn validate(&self) -> Result<()> {
        if let ScoreKind::Lp(p) = *self {
            if !p.is_finite() {
                return Err(Error::Parameter(format!("Lp exponent must be finite, got {p}")));
            }
            if p < 1.0 {
                return Err(Error::Parameter(format!("Lp exponent must be >= 1, got {p}")));
            }
        }
        Ok(())
    }

    /// True for every kind built on a distance (all but dot-product).
    pub fn is_distance(&self) -> bool {
        !matches!(self, ScoreKind::DotProduct)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::DotProduct => f.write_str("dot"),
            ScoreKind::L1 => f.write_str("l1"),
            ScoreKind::SquaredL2 => f.write_str("sql2"),
            ScoreKind::Lp(p) => write!(f, "lp:{p}"),
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    /// Accepts `dot`, `l1`, `sql2` and `lp:<p>` (plus a few aliases).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "dot" | "dotproduct" | "dot-product" => ScoreKind::DotProduct,
            "l1" | "laplacian" => ScoreKind::L1,
            "sql2" | "squaredl2" | "squared-l2" | "l2sq" => ScoreKind::SquaredL2,
            other => {
                let p = other
                    .strip_prefix("lp:")
                    .or_else(|| other.strip_prefix("lp"))
                    .ok_or_else(|| Error::Parse(format!("unknown score kind {s:?}")))?;
                let p: f64 = p
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad Lp exponent in {s:?}")))?;
                ScoreKind::Lp(p)
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl From<ScoreKind> for String {
    fn from(k: ScoreKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for ScoreKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Boolean attention mask; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Fails if any query row has no allowed key.
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Parameter(format!(
                "mask has {} entries, expected {rows}x{cols}",
                allowed.len()
            )));
        }
        for i in 0..rows {
            if !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                return Err(Error::Config(format!("mask row {i} allows no keys")));
            }
        }
        Ok(Self { rows, cols, allowed })
    }

    /// Lower-triangular (causal) mask.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Self { rows: n, cols: n, allowed }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

/// Score kind plus its scalar parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub kind: ScoreKind,
    /// Kernel bandwidth λ. Ignored by the dot-product kind.
    pub lambda: f64,
    pub d_k: usize,
    pub mask: Option<Mask>,
}

impl AttentionSpec {
    pub fn new(kind: ScoreKind, lambda: f64, d_k: usize) -> Result<Self> {
        let spec = Self {
            kind,
            lambda,
            d_k,
            mask: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dot(d_k: usize) -> Self {
        Self {
            kind: ScoreKind::DotProduct,
            lambda: 1.0,
            d_k,
            mask: None,
        }
    }

    pub fn l1(lambda: f64, d_k: usize) -> Result<Self> {
        Self::new(ScoreKind::L1, lambda, d_k)
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.d_k == 0 {
            return Err(Error::Parameter("d_k must be >= 1".into()));
        }
        Ok(())
    }

    /// Factor applied to the raw pairwise quantity to obtain the score.
    pub fn coefficient(&self) -> f64 {
        let inv_sqrt = 1.0 / (self.d_k as f64).sqrt();
        match self.kind {
            ScoreKind::DotProduct => inv_sqrt,
            _ => -self.lambda * inv_sqrt,
        }
    }
}

fn check_features(op: &'static str, q: &Matrix, k: &Matrix) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::dim(op, q.shape(), k.shape()));
    }
    Ok(())
}

pub(crate) fn l1_distances_counted<S: OpSink>(q: &Matrix, k: &Matrix, sink: &mut S) -> Matrix {
    let terms = (q.cols() * k.rows()) as u64;
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for j in 0..k.rows() {
            let mut acc = 0.0;
            for (a, b) in qi.iter().zip(k.row(j)) {
                acc += (a - b).abs();
            }
            out.set(i, j, acc);
        }
        sink.abs_diffs(terms);
        sink.adds(terms);
    }
    out
}

pub(crate) fn squared_l2_distances_counted<S: OpSink>(q: &Matrix, k: &Matrix, sink: &mut S) -> Matrix {
    let terms = (q.cols() * k.rows()) as u64;
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for j in 0..k.rows() {
            let mut acc = 0.0;
            for (a, b) in qi.iter().zip(k.row(j)) {
                let d = a - b;
                acc += d * d;
            }
            out.set(i, j, acc);
        }
        sink.abs_diffs(terms);
        sink.mults(terms);
        sink.adds(terms);
    }
    out
}

pub(crate) fn lp_distances_counted<S: OpSink>(q: &Matrix, k: &Matrix, p: f64, sink: &mut S) -> Matrix {
    let terms = (q.cols() * k.rows()) as u64;
    let entries = k.rows() as u64;
    let inv_p = 1.0 / p;
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for j in 0..k.rows() {
            let mut acc = 0.0;
            for (a, b) in qi.iter().zip(k.row(j)) {
                acc += (a - b).abs().powf(p);
            }
            out.set(i, j, acc.powf(inv_p));
        }
        sink.abs_diffs(terms);
        sink.mults(terms + entries);
        sink.adds(terms);
        sink.exps(2 * terms + 2 * entries);
    }
    out
}

pub(crate) fn dot_products_counted<S: OpSink>(q: &Matrix, k: &Matrix, sink: &mut S) -> Matrix {
    let terms = (q.cols() * k.rows()) as u64;
    let mut out = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        for j in 0..k.rows() {
            let mut acc = 0.0;
            for (a, b) in qi.iter().zip(k.row(j)) {
                acc += a * b;
            }
            out.set(i, j, acc);
        }
        sink.mults(terms);
        sink.adds(terms);
    }
    out
}

/// Positive L1 distance matrix `D[i][j] = Σₘ |q[i][m] − k[j][m]|`.
pub fn l1_distance_matrix(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_features("l1_distance_matrix", q, k)?;
    Ok(l1_distances_counted(q, k, &mut NoCount))
}

/// Squared Euclidean distance matrix.
pub fn squared_l2_distance_matrix(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    check_features("squared_l2_distance_matrix", q, k)?;
    Ok(squared_l2_distances_counted(q, k, &mut NoCount))
}

/// Minkowski distance matrix `(Σₘ |q[i][m] − k[j][m]|^p)^(1/p)` for finite `p ≥ 1`.
pub fn lp_distance_matrix(q: &Matrix, k: &Matrix, p: f64) -> Result<Matrix> {
    ScoreKind::Lp(p).validate()?;
    check_features("lp_distance_matrix", q, k)?;
    Ok(lp_distances_counted(q, k, p, &mut NoCount))
}

/// The raw pairwise quantity for `kind`, reporting its operations to `sink`.
pub fn raw_scores_counted<S: OpSink>(kind: ScoreKind, q: &Matrix, k: &Matrix, sink: &mut S) -> Result<Matrix> {
    kind.validate()?;
    check_features("raw_scores", q, k)?;
    Ok(match kind {
        ScoreKind::DotProduct => dot_products_counted(q, k, sink),
        ScoreKind::L1 => l1_distances_counted(q, k, sink),
        ScoreKind::SquaredL2 => squared_l2_distances_counted(q, k, sink),
        ScoreKind::Lp(p) => lp_distances_counted(q, k, p, sink),
    })
}

/// Pre-softmax score matrix; masked entries hold [`MASKED_SCORE`].
pub fn score_matrix(spec: &AttentionSpec, q: &Matrix, k: &Matrix) -> Result<Matrix> {
    score_matrix_counted(spec, q, k, &mut NoCount)
}

/// [`score_matrix`] reporting the raw-score operations to `sink`.
pub fn score_matrix_counted<S: OpSink>(spec: &AttentionSpec, q: &Matrix, k: &Matrix, sink: &mut S) -> Result<Matrix> {
    spec.validate()?;
    check_features("score_matrix", q, k)?;
    if q.cols() != spec.d_k {
        return Err(Error::dim("score_matrix: d_k vs q.cols", (spec.d_k, spec.d_k), q.shape()));
    }
    if let Some(mask) = &spec.mask {
        if mask.shape() != (q.rows(), k.rows()) {
            return Err(Error::dim("score_matrix: mask", mask.shape(), (q.rows(), k.rows())));
        }
    }
    let mut s = raw_scores_counted(spec.kind, q, k, sink)?;
    let coef = spec.coefficient();
    s.data_mut().iter_mut().for_each(|x| *x *= coef);
    if let Some(mask) = &spec.mask {
        for i in 0..s.rows() {
            for j in 0..s.cols() {
                if !mask.allows(i, j) {
                    s.set(i, j, MASKED_SCORE);
                }
            }
        }
    }
    Ok(s)
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub o: Matrix,
    pub alpha: Matrix,
}

/// `alpha = softmax(score_matrix)`, `o = alpha · v`.
pub fn attention_forward(spec: &AttentionSpec, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<AttentionOutput> {
    attention_forward_counted(spec, q, k, v, &mut NoCount)
}

pub fn attention_forward_counted<S: OpSink>(
    spec: &AttentionSpec,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    sink: &mut S,
) -> Result<AttentionOutput> {
    if k.rows() != v.rows() {
        return Err(Error::dim("attention_forward: k vs v rows", k.shape(), v.shape()));
    }
    let mut alpha = score_matrix_counted(spec, q, k, sink)?;
    if alpha.is_empty() {
        return Err(Error::Domain("attention over an empty score matrix".into()));
    }
    for i in 0..alpha.rows() {
        softmax_in_place(alpha.row_mut(i));
    }
    let o = matmul(&alpha, v)?;
    Ok(AttentionOutput { o, alpha })
}

/// Max absolute output deviation between dot-product attention and
/// squared-L2 attention with bandwidth `lambda`, both on row-normalised Q, K.
pub fn squared_l2_vs_dot_deviation(q: &Matrix, k: &Matrix, v: &Matrix, lambda: f64) -> Result<f64> {
    let qn = l2_normalize_rows(q)?;
    let kn = l2_normalize_rows(k)?;
    let d_k = qn.cols();
    let dot = attention_forward(&AttentionSpec::dot(d_k), &qn, &kn, v)?;
    let sq = attention_forward(&AttentionSpec::new(ScoreKind::SquaredL2, lambda, d_k)?, &qn, &kn, v)?;
    dot.o.max_abs_diff(&sq.o)
}

/// On unit rows `−½‖q−k‖² = ⟨q,k⟩ − 1`, and the constant cancels in the
/// softmax, so squared-L2 attention at λ = ½ reproduces dot-product attention.
/// Returns the observed max absolute deviation of the outputs.
pub fn dot_equivalence_check(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<f64> {
    squared_l2_vs_dot_deviation(q, k, v, 0.5)
}

/// Per-dimension attention kernel `k(d)`.
///
/// Dot-product and squared-L2 kinds use the Gaussian `exp(−d² / (2√Dk))`,
/// which does not depend on `lambda`. L1 and Lp use the Laplacian
/// `exp(−λ|d| / √Dk)` (a single dimension has Lp distance `|d|`).
pub fn kernel_weight(kind: ScoreKind, lambda: f64, d_k: usize, d: f64) -> f64 {
    let root = (d_k.max(1) as f64).sqrt();
    match kind {
        ScoreKind::DotProduct | ScoreKind::SquaredL2 => gaussian_kernel(d_k, d),
        ScoreKind::L1 | ScoreKind::Lp(_) => (-lambda * d.abs() / root).exp(),
    }
}

pub fn gaussian_kernel(d_k: usize, d: f64) -> f64 {
    (-d * d / (2.0 * (d_k.max(1) as f64).sqrt())).exp()
}

pub fn laplacian_kernel(lambda: f64, d_k: usize, d: f64) -> f64 {
    kernel_weight(ScoreKind::L1, lambda, d_k, d)
}

/// Bandwidth `½·Dk^¼` at which the Laplacian kernel meets the Gaussian at the
/// Gaussian's inflection point `d = Dk^¼`.
pub fn kernel_crossing_lambda(d_k: usize) -> f64 {
    0.5 * (d_k.max(1) as f64).powf(0.25)
}

/// Inflection point `Dk^¼` of the Gaussian kernel.
pub fn gaussian_inflection_point(d_k: usize) -> f64 {
    (d_k.max(1) as f64).powf(0.25)
}

/// CSV of kernel curves on `steps + 1` evenly spaced points in `[0, dmax]`.
/// Columns: `d`, `gaussian`, then one `laplacian_lambda_<λ>` per bandwidth.
pub fn kernel_curves_csv(d_k: usize, lambdas: &[f64], dmax: f64, steps: usize) -> Result<String> {
    if d_k == 0 {
        return Err(Error::Parameter("d_k must be >= 1".into()));
    }
    if !(dmax.is_finite() && dmax >= 0.0) {
        return Err(Error::Parameter(format!("dmax must be finite and >= 0, got {dmax}")));
    }
    if steps == 0 {
        return Err(Error::Parameter("steps must be >= 1".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::Parameter(format!("lambda must be finite and >= 0, got {l}")));
    }
    let mut out = String::from("d,gaussian");
    for l in lambdas {
        out.push_str(&format!(",laplacian_lambda_{l}"));
    }
    out.push('\n');
    for s in 0..=steps {
        let d = dmax * s as f64 / steps as f64;
        out.push_str(&format!("{d},{}", gaussian_kernel(d_k, d)));
        for &l in lambdas {
            out.push_str(&format!(",{}", laplacian_kernel(l, d_k, d)));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Multi-head attention with per-head column blocks of `W_Q`, `W_K`, `W_V`
/// and an output projection `W_O`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadSpec {
    pub d_model: usize,
    pub heads: usize,
    pub head_spec: AttentionSpec,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

impl MultiHeadSpec {
    pub fn new(
        d_model: usize,
        heads: usize,
        head_spec: AttentionSpec,
        w_q: Matrix,
        w_k: Matrix,
        w_v: Matrix,
        w_o: Matrix,
    ) -> Result<Self> {
        let mh = Self {
            d_model,
            heads,
            head_spec,
            w_q,
            w_k,
            w_v,
            w_o,
        };
        mh.validate()?;
        Ok(mh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.heads
            )));
        }
        if self.head_spec.d_k != self.d_model / self.heads {
            return Err(Error::Config(format!(
                "head d_k {} != d_model / heads = {}",
                self.head_spec.d_k,
                self.d_model / self.heads
            )));
        }
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape() != (self.d_model, self.d_model) {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {d}x{d}",
                    w.shape(),
                    d = self.d_model
                )));
            }
        }
        self.head_spec.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

pub fn multi_head_forward(mh: &MultiHeadSpec, x: &Matrix) -> Result<Matrix> {
    multi_head_forward_counted(mh, x, &mut NoCount)
}

pub fn multi_head_forward_counted<S: OpSink>(mh: &MultiHeadSpec, x: &Matrix, sink: &mut S) -> Result<Matrix> {
    mh.validate()?;
    if x.cols() != mh.d_model {
        return Err(Error::dim("multi_head_forward", x.shape(), (x.rows(), mh.d_model)));
    }
    let q = matmul(x, &mh.w_q)?;
    let k = matmul(x, &mh.w_k)?;
    let v = matmul(x, &mh.w_v)?;
    let dh = mh.head_dim();
    let mut concat = Matrix::zeros(x.rows(), mh.d_model);
    for h in 0..mh.heads {
        let start = h * dh;
        let out = attention_forward_counted(
            &mh.head_spec,
            &q.col_block(start, dh),
            &k.col_block(start, dh),
            &v.col_block(start, dh),
            sink,
        )?;
        concat.set_col_block(start, &out.o);
    }
    matmul(&concat, &mh.w_o)
}

/// Counts the score operations of a multi-head forward by running it.
pub fn multi_head_score_tally(mh: &MultiHeadSpec, x: &Matrix) -> Result<OpTally> {
    let mut tally = OpTally::default();
    multi_head_forward_counted(mh, x, &mut tally)?;
    Ok(tally)
}

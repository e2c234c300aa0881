//! Linear-complexity distance attention: sliding window with global tokens,
//! and low-rank key/value projection.

use crate::attention::{attention_forward_counted, AttentionSpec};
use crate::error::{Error, Result};
use crate::ops::{score_op_counts, NoCount, OpSink, OpTally};
use crate::tensor::{matmul, rand_matrix, Matrix, Rng};

/// Sliding window of even width `w` plus a sorted set of global token positions.
///
/// Token `t` attends locally to `[t − w/2, t + w/2]`, clipped to the sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub global_indices: Vec<usize>,
}

impl WindowSpec {
    pub fn new(window: usize, mut global_indices: Vec<usize>) -> Result<Self> {
        if window < 2 || !window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be even and >= 2, got {window}")));
        }
        global_indices.sort_unstable();
        global_indices.dedup();
        Ok(Self { window, global_indices })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be even and >= 2, got {}", self.window)));
        }
        if !self.global_indices.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config("global indices must be sorted and unique".into()));
        }
        if let Some(&g) = self.global_indices.iter().find(|&&g| g >= n) {
            return Err(Error::Config(format!("global index {g} out of range for {n} tokens")));
        }
        Ok(())
    }

    /// Inclusive-exclusive key range `[lo, hi)` attended locally by token `t`.
    pub fn local_range(&self, t: usize, n: usize) -> (usize, usize) {
        let half = self.window / 2;
        (t.saturating_sub(half), (t + half + 1).min(n))
    }
}

/// Closed-form score tally of [`longformer_l1_forward`] with clipped windows.
pub fn longformer_score_op_counts(spec: &AttentionSpec, win: &WindowSpec, n: usize) -> OpTally {
    (0..n)
        .map(|t| {
            let (lo, hi) = win.local_range(t, n);
            score_op_counts(spec.kind, 1, hi - lo + win.global_indices.len(), spec.d_k)
        })
        .sum()
}

/// Sliding-window plus global distance attention.
///
/// Row `t` of the output is `local(t) + global(t)`: softmax attention of `q_t`
/// over its clipped window, plus softmax attention of `q_t` over the global
/// key/value rows. The global term is the zero vector when there are no global
/// tokens. The two terms are summed as-is, so a key in both sets contributes twice.
pub fn longformer_l1_forward(spec: &AttentionSpec, win: &WindowSpec, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    longformer_l1_forward_counted(spec, win, q, k, v, &mut NoCount)
}

pub fn longformer_l1_forward_counted<S: OpSink>(
    spec: &AttentionSpec,
    win: &WindowSpec,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    sink: &mut S,
) -> Result<Matrix> {
    let n = q.rows();
    if k.rows() != n || v.rows() != n {
        return Err(Error::Config(format!(
            "q, k, v must share the token count: {}, {}, {}",
            n,
            k.rows(),
            v.rows()
        )));
    }
    if spec.mask.is_some() {
        return Err(Error::Config("windowed attention does not take a dense mask".into()));
    }
    win.validate(n)?;
    let mut out = Matrix::zeros(n, v.cols());
    let k_global = k.select_rows(&win.global_indices);
    let v_global = v.select_rows(&win.global_indices);
    for t in 0..n {
        let qt = q.select_rows(&[t]);
        let (lo, hi) = win.local_range(t, n);
        let idx: Vec<usize> = (lo..hi).collect();
        let local = attention_forward_counted(spec, &qt, &k.select_rows(&idx), &v.select_rows(&idx), sink)?;
        let row = out.row_mut(t);
        row.copy_from_slice(local.o.row(0));
        if !win.global_indices.is_empty() {
            let global = attention_forward_counted(spec, &qt, &k_global, &v_global, sink)?;
            for (o, g) in row.iter_mut().zip(global.o.row(0)) {
                *o += g;
            }
        }
    }
    Ok(out)
}

/// `k × N` projections compressing keys and values to `k` pseudo-tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    pub e_k: Matrix,
    pub e_v: Matrix,
}

impl ProjectionSpec {
    pub fn new(e_k: Matrix, e_v: Matrix) -> Result<Self> {
        if e_k.shape() != e_v.shape() {
            return Err(Error::dim("projection E_K vs E_V", e_k.shape(), e_v.shape()));
        }
        if e_k.rows() == 0 {
            return Err(Error::Config("projection dimension must be >= 1".into()));
        }
        Ok(Self { e_k, e_v })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            e_k: Matrix::identity(n),
            e_v: Matrix::identity(n),
        }
    }

    /// Uniform entries in `[−1/√N, 1/√N]`, `E_K` drawn before `E_V`.
    pub fn random(rng: &mut Rng, k_dim: usize, n: usize) -> Result<Self> {
        if k_dim == 0 || n == 0 {
            return Err(Error::Config("projection needs k_dim >= 1 and n >= 1".into()));
        }
        let scale = 1.0 / (n as f64).sqrt();
        let e_k = rand_matrix(rng, k_dim, n, scale)?;
        let e_v = rand_matrix(rng, k_dim, n, scale)?;
        Self::new(e_k, e_v)
    }

    pub fn k_dim(&self) -> usize {
        self.e_k.rows()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.e_k.cols() != n || self.e_v.cols() != n || self.e_k.rows() != self.e_v.rows() {
            return Err(Error::dim("projection vs sequence length", self.e_k.shape(), (self.e_k.rows(), n)));
        }
        Ok(())
    }
}

/// Distance attention against projected keys `E_K·K` and values `E_V·V`.
pub fn linformer_l1_forward(spec: &AttentionSpec, proj: &ProjectionSpec, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    linformer_l1_forward_counted(spec, proj, q, k, v, &mut NoCount)
}

pub fn linformer_l1_forward_counted<S: OpSink>(
    spec: &AttentionSpec,
    proj: &ProjectionSpec,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    sink: &mut S,
) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::dim("linformer: k vs v rows", k.shape(), v.shape()));
    }
    if spec.mask.is_some() {
        return Err(Error::Config("projected attention does not take a dense mask".into()));
    }
    proj.validate(k.rows())?;
    let k_proj = matmul(&proj.e_k, k)?;
    let v_proj = matmul(&proj.e_v, v)?;
    Ok(attention_forward_counted(spec, q, &k_proj, &v_proj, sink)?.o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_forward;

    fn qkv(seed: u64, n: usize, d: usize) -> (Matrix, Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        (
            rand_matrix(&mut rng, n, d, 1.0).unwrap(),
            rand_matrix(&mut rng, n, d, 1.0).unwrap(),
            rand_matrix(&mut rng, n, d, 1.0).unwrap(),
        )
    }

    #[test]
    fn wide_window_without_globals_is_dense() {
        let (q, k, v) = qkv(1, 7, 4);
        let spec = AttentionSpec::l1(1.3, 4).unwrap();
        let win = WindowSpec::new(14, vec![]).unwrap();
        let got = longformer_l1_forward(&spec, &win, &q, &k, &v).unwrap();
        let dense = attention_forward(&spec, &q, &k, &v).unwrap().o;
        assert!(got.max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = qkv(2, 1, 3);
        let spec = AttentionSpec::l1(1.0, 3).unwrap();
        let got = longformer_l1_forward(&spec, &WindowSpec::new(2, vec![]).unwrap(), &q, &k, &v).unwrap();
        assert_eq!(got, v);
    }

    #[test]
    fn all_global_doubles_dense_output() {
        let (q, k, v) = qkv(3, 5, 4);
        let spec = AttentionSpec::l1(2.0, 4).unwrap();
        let win = WindowSpec::new(10, (0..5).collect()).unwrap();
        let got = longformer_l1_forward(&spec, &win, &q, &k, &v).unwrap();
        let dense = attention_forward(&spec, &q, &k, &v).unwrap().o;
        assert!(got.max_abs_diff(&dense.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn window_invariants() {
        assert!(WindowSpec::new(3, vec![]).is_err());
        assert!(WindowSpec::new(0, vec![]).is_err());
        let (q, k, v) = qkv(4, 4, 2);
        let spec = AttentionSpec::l1(1.0, 2).unwrap();
        let win = WindowSpec::new(2, vec![4]).unwrap();
        assert!(matches!(
            longformer_l1_forward(&spec, &win, &q, &k, &v),
            Err(Error::Config(_))
        ));
        assert_eq!(WindowSpec::new(2, vec![3, 1, 3]).unwrap().global_indices, vec![1, 3]);
    }

    #[test]
    fn clipped_ranges() {
        let win = WindowSpec::new(4, vec![]).unwrap();
        assert_eq!(win.local_range(0, 10), (0, 3));
        assert_eq!(win.local_range(5, 10), (3, 8));
        assert_eq!(win.local_range(9, 10), (7, 10));
    }

    #[test]
    fn instrumented_window_tally_matches_closed_form() {
        let (q, k, v) = qkv(5, 9, 3);
        let spec = AttentionSpec::l1(1.0, 3).unwrap();
        let win = WindowSpec::new(4, vec![0, 6]).unwrap();
        let mut tally = OpTally::default();
        longformer_l1_forward_counted(&spec, &win, &q, &k, &v, &mut tally).unwrap();
        assert_eq!(tally, longformer_score_op_counts(&spec, &win, 9));
        assert_eq!(tally.mults, 0);
    }

    #[test]
    fn identity_projection_is_dense() {
        let (q, k, v) = qkv(6, 6, 5);
        let spec = AttentionSpec::l1(0.7, 5).unwrap();
        let got = linformer_l1_forward(&spec, &ProjectionSpec::identity(6), &q, &k, &v).unwrap();
        let dense = attention_forward(&spec, &q, &k, &v).unwrap().o;
        assert!(got.max_abs_diff(&dense).unwrap() < 1e-12);
    }

    #[test]
    fn rank_one_projection_collapses_rows() {
        let (q, k, v) = qkv(7, 6, 3);
        let spec = AttentionSpec::l1(1.0, 3).unwrap();
        let proj = ProjectionSpec::random(&mut Rng::new(8), 1, 6).unwrap();
        let got = linformer_l1_forward(&spec, &proj, &q, &k, &v).unwrap();
        let pv = matmul(&proj.e_v, &v).unwrap();
        for i in 0..6 {
            assert_eq!(got.row(i), pv.row(0));
        }
    }

    #[test]
    fn projection_shape_mismatch() {
        let (q, k, v) = qkv(9, 6, 3);
        let spec = AttentionSpec::l1(1.0, 3).unwrap();
        let proj = ProjectionSpec::random(&mut Rng::new(1), 2, 5).unwrap();
        assert!(matches!(
            linformer_l1_forward(&spec, &proj, &q, &k, &v),
            Err(Error::Dimension { .. })
        ));
    }
}

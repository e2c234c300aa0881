use ecoattn::attention::{gaussian_kernel, gaussian_inflection_point, kernel_crossing_lambda, laplacian_kernel};
use ecoattn::tensor::matmul;
use ecoattn::{attention_forward, softmax_rows, AttentionSpec, Matrix, ScoreKind};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

/// (n, d_k, Q, K, V) with V carrying `dv` columns.
fn qkv() -> impl Strategy<Value = (usize, usize, Matrix, Matrix, Matrix)> {
    (1usize..8, 1usize..8, 1usize..5).prop_flat_map(|(n, dk, dv)| {
        (Just(n), Just(dk), matrix(n, dk), matrix(n, dk), matrix(n, dv))
    })
}

fn kinds() -> impl Strategy<Value = ScoreKind> {
    prop_oneof![
        Just(ScoreKind::DotProduct),
        Just(ScoreKind::L1),
        Just(ScoreKind::SquaredL2),
        Just(ScoreKind::Lp(3.0)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(m in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = softmax_rows(&m.scale(40.0)).unwrap();
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn softmax_shift_invariant(m in (1usize..8, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c)), shift in -50.0f64..50.0) {
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&m.map(|x| x + shift)).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n)))
    ) {
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = 1.0 + left.max_abs();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-12 * scale);
    }

    #[test]
    fn attention_rows_stochastic((_, dk, q, k, v) in qkv(), kind in kinds(), lambda in 0.1f64..4.0) {
        let spec = AttentionSpec::new(kind, lambda, dk).unwrap();
        let out = attention_forward(&spec, &q, &k, &v).unwrap();
        for i in 0..out.alpha.rows() {
            let sum: f64 = out.alpha.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(out.alpha.row(i).iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn l1_alpha_translation_invariant((n, dk, q, k, v) in qkv(), shift in prop::collection::vec(-5.0f64..5.0, 8)) {
        let spec = AttentionSpec::l1(1.0, dk).unwrap();
        let c = Matrix::from_fn(n, dk, |_, j| shift[j]);
        let base = attention_forward(&spec, &q, &k, &v).unwrap();
        let moved = attention_forward(&spec, &q.add(&c).unwrap(), &k.add(&c).unwrap(), &v).unwrap();
        prop_assert!(base.alpha.max_abs_diff(&moved.alpha).unwrap() < 1e-12);
    }

    #[test]
    fn l1_scale_lambda_duality((_, dk, q, k, v) in qkv(), c in 0.25f64..4.0, lambda in 0.1f64..3.0) {
        let scaled = attention_forward(&AttentionSpec::l1(lambda, dk).unwrap(), &q.scale(c), &k.scale(c), &v).unwrap();
        let folded = attention_forward(&AttentionSpec::l1(lambda * c, dk).unwrap(), &q, &k, &v).unwrap();
        prop_assert!(scaled.alpha.max_abs_diff(&folded.alpha).unwrap() < 1e-12);
    }

    #[test]
    fn key_value_permutation_equivariant((n, dk, q, k, v) in qkv(), kind in kinds(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..n).collect();
        ecoattn::Rng::new(seed).shuffle(&mut perm);
        let spec = AttentionSpec::new(kind, 1.0, dk).unwrap();
        let base = attention_forward(&spec, &q, &k, &v).unwrap();
        let permuted = attention_forward(&spec, &q, &k.select_rows(&perm), &v.select_rows(&perm)).unwrap();
        prop_assert!(base.o.max_abs_diff(&permuted.o).unwrap() < 1e-12);
    }

    #[test]
    fn query_permutation_permutes_output((n, dk, q, k, v) in qkv(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..n).collect();
        ecoattn::Rng::new(seed).shuffle(&mut perm);
        let spec = AttentionSpec::l1(1.0, dk).unwrap();
        let base = attention_forward(&spec, &q, &k, &v).unwrap();
        let permuted = attention_forward(&spec, &q.select_rows(&perm), &k, &v).unwrap();
        prop_assert!(base.o.select_rows(&perm).max_abs_diff(&permuted.o).unwrap() < 1e-12);
    }

    #[test]
    fn kernels_decrease_in_distance(dk in 1usize..512, lambda in 0.05f64..5.0, d in 0.0f64..10.0, step in 1e-3f64..2.0) {
        prop_assert!(gaussian_kernel(dk, d + step) < gaussian_kernel(dk, d) || gaussian_kernel(dk, d) == 0.0);
        prop_assert!(laplacian_kernel(lambda, dk, d + step) < laplacian_kernel(lambda, dk, d) || laplacian_kernel(lambda, dk, d) == 0.0);
        prop_assert!((gaussian_kernel(dk, -d) - gaussian_kernel(dk, d)).abs() == 0.0);
    }

    #[test]
    fn laplacian_tail_heavier_beyond_crossing(dk in 1usize..1024) {
        let lambda = kernel_crossing_lambda(dk);
        let d = 3.0 * gaussian_inflection_point(dk);
        prop_assert!(laplacian_kernel(lambda, dk, d) > gaussian_kernel(dk, d));
    }
}

#[test]
fn dot_scores_not_translation_invariant() {
    let q = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
    let k = Matrix::from_rows(&[[0.5, 1.0], [1.0, -1.0]]).unwrap();
    let v = Matrix::identity(2);
    let c = Matrix::filled(2, 2, 3.0);
    let spec = AttentionSpec::dot(2);
    let base = attention_forward(&spec, &q, &k, &v).unwrap();
    let moved = attention_forward(&spec, &q.add(&c).unwrap(), &k.add(&c).unwrap(), &v).unwrap();
    assert!(base.alpha.max_abs_diff(&moved.alpha).unwrap() > 1e-3);
}

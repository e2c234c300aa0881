//! Distance-based attention with a multiplication-free L1 score.
//!
//! The crate provides dense attention under dot-product, L1, squared-L2 and
//! general Lp scores, sliding-window and projected L1 variants, analytic
//! gradients checked against central differences, exact operation tallies
//! with a per-op energy model, and a small transformer trainer for A/B runs.

pub mod attention;
pub mod cli;
pub mod error;
pub mod grad;
pub mod ops;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use attention::{
    attention_forward, dot_equivalence_check, kernel_crossing_lambda, kernel_weight, l1_distance_matrix,
    lp_distance_matrix, multi_head_forward, score_matrix, AttentionOutput, AttentionSpec, Mask, MultiHeadSpec,
    ScoreKind,
};
pub use error::{Error, Result};
pub use grad::{attention_backward, finite_difference_check, AttentionGrads, FdReport};
pub use ops::{energy_estimate, reduction_report, score_op_counts, EnergyModel, OpTally};
pub use sparse::{linformer_l1_forward, longformer_l1_forward, ProjectionSpec, WindowSpec};
pub use tensor::{l2_normalize_rows, matmul, rand_matrix, softmax_rows, Matrix, Rng};

#ifndef ECOATTN_H
#define ECOATTN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EcoScoreKind {
  ECO_SCORE_KIND_DOT = 0,
  ECO_SCORE_KIND_L1 = 1,
  ECO_SCORE_KIND_SQUARED_L2 = 2,
  /**
   * General Lp distance; the exponent is passed separately.
   */
  ECO_SCORE_KIND_LP = 3,
} EcoScoreKind;

/**
 * Result code of every fallible call.
 */
typedef enum EcoStatus {
  ECO_STATUS_OK = 0,
  ECO_STATUS_NULL_POINTER = 1,
  ECO_STATUS_DIMENSION = 2,
  ECO_STATUS_INVALID_PARAMETER = 3,
  ECO_STATUS_DOMAIN = 4,
  ECO_STATUS_DEGENERATE_ROW = 5,
  ECO_STATUS_CONFIG = 6,
  ECO_STATUS_NON_FINITE = 7,
  ECO_STATUS_PARSE = 8,
  ECO_STATUS_DEGENERATE_MODEL = 9,
  ECO_STATUS_PANIC = 10,
  ECO_STATUS_INTERNAL = 11,
} EcoStatus;

/**
 * Opaque attention configuration: score kind, λ, key dimension, optional mask.
 */
typedef struct EcoAttentionSpec EcoAttentionSpec;

/**
 * Opaque row-major matrix of doubles.
 */
typedef struct EcoMatrix EcoMatrix;

typedef struct EcoOpTally {
  uint64_t mults;
  uint64_t adds;
  uint64_t abs_diffs;
  uint64_t exps;
  uint64_t divs;
} EcoOpTally;

/**
 * Picojoules per operation.
 */
typedef struct EcoEnergyModel {
  double pj_mult;
  double pj_add;
  double pj_abs_diff;
  double pj_exp;
  double pj_div;
} EcoEnergyModel;

typedef struct EcoReductionReport {
  size_t n;
  size_t d_k;
  double dot_pj;
  double l1_pj;
  double reduction_fraction;
  double mult_add_ratio;
} EcoReductionReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length including the NUL,
 * or 0 when the last call succeeded.
 */
size_t eco_last_error_message(char *buf, size_t len);

/**
 * Creates a `rows × cols` matrix from `rows * cols` row-major values, or a
 * zero matrix when `data` is null.
 */
enum EcoStatus eco_matrix_new(size_t rows, size_t cols, const double *data, struct EcoMatrix **out);

/**
 * Uniform entries in `[-scale, scale)` drawn from the library's seeded generator.
 */
enum EcoStatus eco_matrix_random(size_t rows,
                                 size_t cols,
                                 uint64_t seed,
                                 double scale,
                                 struct EcoMatrix **out);

void eco_matrix_free(struct EcoMatrix *m);

/**
 * Row count, or 0 for a null handle.
 */
size_t eco_matrix_rows(const struct EcoMatrix *m);

/**
 * Column count, or 0 for a null handle.
 */
size_t eco_matrix_cols(const struct EcoMatrix *m);

/**
 * Copies the row-major values into `buf`, which must hold `rows * cols` doubles.
 */
enum EcoStatus eco_matrix_copy_data(const struct EcoMatrix *m, double *buf, size_t len);

/**
 * `p` is read only for `ECO_SCORE_KIND_LP`.
 */
enum EcoStatus eco_spec_new(enum EcoScoreKind kind,
                            double p,
                            double lambda,
                            size_t d_k,
                            struct EcoAttentionSpec **out);

/**
 * Sets a `rows × cols` row-major mask; nonzero bytes allow attention.
 * Passing null `allowed` clears the mask.
 */
enum EcoStatus eco_spec_set_mask(struct EcoAttentionSpec *spec,
                                 const uint8_t *allowed,
                                 size_t rows,
                                 size_t cols);

void eco_spec_free(struct EcoAttentionSpec *spec);

/**
 * Pre-softmax scores `S` (`n_q × n_k`).
 */
enum EcoStatus eco_score_matrix(const struct EcoAttentionSpec *spec,
                                const struct EcoMatrix *q,
                                const struct EcoMatrix *k,
                                struct EcoMatrix **out);

/**
 * Output `O = softmax(S)·V`; `out_alpha` may be null.
 */
enum EcoStatus eco_attention_forward(const struct EcoAttentionSpec *spec,
                                     const struct EcoMatrix *q,
                                     const struct EcoMatrix *k,
                                     const struct EcoMatrix *v,
                                     struct EcoMatrix **out_o,
                                     struct EcoMatrix **out_alpha);

/**
 * Sliding-window attention of even width `window` plus `n_globals` global token indices.
 */
enum EcoStatus eco_longformer_forward(const struct EcoAttentionSpec *spec,
                                      size_t window,
                                      const size_t *globals,
                                      size_t n_globals,
                                      const struct EcoMatrix *q,
                                      const struct EcoMatrix *k,
                                      const struct EcoMatrix *v,
                                      struct EcoMatrix **out);

/**
 * Attention against `E_K·K` and `E_V·V`; both projections are `k × N`.
 */
enum EcoStatus eco_linformer_forward(const struct EcoAttentionSpec *spec,
                                     const struct EcoMatrix *e_k,
                                     const struct EcoMatrix *e_v,
                                     const struct EcoMatrix *q,
                                     const struct EcoMatrix *k,
                                     const struct EcoMatrix *v,
                                     struct EcoMatrix **out);

/**
 * Gradients of `sum(upstream ⊙ O)` with respect to Q, K and V.
 */
enum EcoStatus eco_attention_backward(const struct EcoAttentionSpec *spec,
                                      const struct EcoMatrix *q,
                                      const struct EcoMatrix *k,
                                      const struct EcoMatrix *v,
                                      const struct EcoMatrix *upstream,
                                      struct EcoMatrix **out_dq,
                                      struct EcoMatrix **out_dk,
                                      struct EcoMatrix **out_dv);

/**
 * Max absolute deviation between squared-L2 attention (λ = ½) and dot-product
 * attention on row-normalised Q and K.
 */
enum EcoStatus eco_dot_equivalence_check(const struct EcoMatrix *q,
                                         const struct EcoMatrix *k,
                                         const struct EcoMatrix *v,
                                         double *out_deviation);

/**
 * Per-dimension kernel weight at difference `d`; NaN for invalid arguments.
 */
double eco_kernel_weight(enum EcoScoreKind kind, double p, double lambda, size_t d_k, double d);

/**
 * λ at which the Laplacian kernel meets the Gaussian at its inflection point; NaN for `d_k == 0`.
 */
double eco_kernel_crossing_lambda(size_t d_k);

/**
 * Closed-form tally of one `n_q × n_k` score matrix.
 */
enum EcoStatus eco_score_op_counts(enum EcoScoreKind kind,
                                   double p,
                                   size_t n_q,
                                   size_t n_k,
                                   size_t d_k,
                                   struct EcoOpTally *out);

struct EcoEnergyModel eco_energy_model_default(void);

enum EcoStatus eco_energy_estimate(const struct EcoOpTally *tally,
                                   const struct EcoEnergyModel *model,
                                   double *out_pj);

/**
 * Dot-product vs L1 score energy for `n` tokens. A null `model` uses the defaults.
 */
enum EcoStatus eco_reduction_report(size_t n,
                                    size_t d_k,
                                    const struct EcoEnergyModel *model,
                                    struct EcoReductionReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ECOATTN_H */

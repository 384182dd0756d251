#ifndef PEAKLAB_H
#define PEAKLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PeaklabStatus {
  PEAKLAB_STATUS_OK = 0,
  PEAKLAB_STATUS_CONFIG = 1,
  PEAKLAB_STATUS_INPUT = 2,
  PEAKLAB_STATUS_NUMERICAL = 3,
  PEAKLAB_STATUS_TRAINING = 4,
  PEAKLAB_STATUS_DEGENERATE = 5,
  PEAKLAB_STATUS_CORRUPT = 6,
  PEAKLAB_STATUS_VALIDATION = 7,
  PEAKLAB_STATUS_REJECTED = 8,
  PEAKLAB_STATUS_USAGE = 9,
  PEAKLAB_STATUS_IO = 10,
  PEAKLAB_STATUS_PARSE = 11,
  PEAKLAB_STATUS_NULL_POINTER = 12,
  PEAKLAB_STATUS_BUFFER_TOO_SMALL = 13,
  PEAKLAB_STATUS_PANIC = 14,
} PeaklabStatus;

/**
 * Opaque trained or edited model.
 */
typedef struct PeaklabModel PeaklabModel;

/**
 * Architecture of a loaded model.
 */
typedef struct PeaklabModelConfig {
  size_t vocab_size;
  size_t d_model;
  size_t n_layers;
  size_t n_heads;
  size_t d_ff;
  size_t max_seq_len;
} PeaklabModelConfig;

/**
 * Additivity of one prompt, all values in `[0, 1]` except the ratios.
 */
typedef struct PeaklabAdditivity {
  double rff;
  double rnf;
  double cpc;
  double fpc;
  double aff;
  double anf;
} PeaklabAdditivity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`). Returns the untruncated size including
 * the NUL; an empty message means the last call succeeded.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null with `cap == 0`.
 */
size_t peaklab_last_error_message(char *buf, size_t cap);

/**
 * Static, NUL-terminated name of a status (`"E_CONFIG"` style).
 */
const char *peaklab_status_name(enum PeaklabStatus status);

/**
 * Loads a model file and verifies its checksum.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `model` must be writable.
 */
enum PeaklabStatus peaklab_model_load(const char *path_, struct PeaklabModel **model);

/**
 * Loads a weight delta and applies it to `base`, producing a new handle.
 *
 * # Safety
 * `base` must be a live handle, `path` NUL-terminated, `edited` writable.
 */
enum PeaklabStatus peaklab_model_apply_delta(const struct PeaklabModel *base,
                                             const char *path_,
                                             struct PeaklabModel **edited);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void peaklab_model_free(struct PeaklabModel *model);

/**
 * # Safety
 * `model` must be a live handle and `config` writable.
 */
enum PeaklabStatus peaklab_model_config(const struct PeaklabModel *model,
                                        struct PeaklabModelConfig *config);

/**
 * Hex SHA-256 of the parameters (65 bytes with the NUL).
 *
 * # Safety
 * `model` must be a live handle; `buf` valid for `cap` bytes; `required`
 * writable or null.
 */
enum PeaklabStatus peaklab_model_checksum(const struct PeaklabModel *model,
                                          char *buf,
                                          size_t cap,
                                          size_t *required);

/**
 * `log P(answer | prompt)` summed over the answer's tokens.
 *
 * # Safety
 * `model` must be a live handle; token arrays valid for their lengths;
 * `logprob` writable.
 */
enum PeaklabStatus peaklab_answer_logprob(const struct PeaklabModel *model,
                                          const uint32_t *prompt,
                                          size_t prompt_len,
                                          const uint32_t *answer,
                                          size_t answer_len,
                                          double *logprob);

/**
 * RFF of correct-answer probabilities against the best false probability.
 *
 * # Safety
 * `correct` valid for `n`; `value` writable.
 */
enum PeaklabStatus peaklab_ranking_forgetting(const double *correct,
                                              size_t n,
                                              double false_max,
                                              double *value);

/**
 * RNF of false-answer probabilities against the worst correct probability.
 *
 * # Safety
 * `false_probs` valid for `n`; `value` writable.
 */
enum PeaklabStatus peaklab_ranking_noise(const double *false_probs,
                                         size_t n,
                                         double correct_min,
                                         double *value);

/**
 * Full additivity of one prompt from pre- and post-edit probabilities. The
 * ranking thresholds are the post-edit best false and worst correct
 * probabilities.
 *
 * # Safety
 * Each array valid for its length; `result` writable.
 */
enum PeaklabStatus peaklab_additivity(const double *pre_correct,
                                      const double *post_correct,
                                      size_t n_correct,
                                      const double *pre_false,
                                      const double *post_false,
                                      size_t n_false,
                                      struct PeaklabAdditivity *result);

/**
 * `Ŵ = W + Λ (C⁻¹k)ᵀ` with `Λ = (v − W k) / ((C⁻¹k)ᵀ k)`. `w` and `w_hat`
 * are `rows × cols`, `c` is `cols × cols`; `w_hat` may alias `w`.
 *
 * # Safety
 * Arrays valid for the sizes implied by `rows` and `cols`.
 */
enum PeaklabStatus peaklab_rank_one_update(const double *w,
                                           size_t rows,
                                           size_t cols,
                                           const double *k,
                                           const double *v,
                                           const double *c,
                                           double *w_hat);

/**
 * Percentage with two decimals, ties to even (`0.123456 → "12.35"`).
 *
 * # Safety
 * `buf` valid for `cap` bytes; `required` writable or null.
 */
enum PeaklabStatus peaklab_format_percent(double fraction, char *buf, size_t cap, size_t *required);

/**
 * Static, NUL-terminated library version.
 */
const char *peaklab_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEAKLAB_H */

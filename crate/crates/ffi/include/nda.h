#ifndef NDA_H
#define NDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum NdaStatus {
  NDA_STATUS_OK = 0,
  NDA_STATUS_NULL_POINTER = 1,
  NDA_STATUS_INVALID_ARGUMENT = 2,
  NDA_STATUS_IO = 3,
  NDA_STATUS_FORMAT = 4,
  NDA_STATUS_DIMENSION_MISMATCH = 5,
  NDA_STATUS_NUMERICAL = 6,
  NDA_STATUS_PANIC = 7,
} NdaStatus;

/**
 * Opaque scoring handle: a model bundle or a synthetic-corpus oracle.
 */
typedef struct NdaScorer NdaScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model bundle or oracle JSON file. On success `*out` receives a
 * handle to release with [`nda_scorer_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NdaStatus nda_scorer_load(const char *path, struct NdaScorer **out);

/**
 * Like [`nda_scorer_load`] but reads the model from a JSON string.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NdaStatus nda_scorer_from_json(const char *json, struct NdaScorer **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `scorer` must come from this library and not be used afterwards.
 */
void nda_scorer_free(struct NdaScorer *scorer);

/**
 * Dimension of the vectors the model accepts; 0 for a null handle.
 *
 * # Safety
 * `scorer` must be null or a live handle.
 */
size_t nda_scorer_input_dim(const struct NdaScorer *scorer);

/**
 * Dimension of the latent vectors produced by [`nda_scorer_embed`].
 *
 * # Safety
 * `scorer` must be null or a live handle.
 */
size_t nda_scorer_latent_dim(const struct NdaScorer *scorer);

/**
 * Log likelihood-ratio score of one trial. `enroll` holds `n_enroll`
 * vectors of `dim` values each; `test` holds one.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum NdaStatus nda_scorer_score(const struct NdaScorer *scorer,
                                const double *enroll,
                                size_t n_enroll,
                                const double *test,
                                size_t dim,
                                double *out_score);

/**
 * Maps one input vector to the latent space the model scores in, writing
 * `out_len` (= latent dim) values.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum NdaStatus nda_scorer_embed(const struct NdaScorer *scorer,
                                const double *x,
                                size_t dim,
                                double *out,
                                size_t out_len);

/**
 * Equal error rate of `n` scores; `labels[i]` is nonzero for target trials.
 *
 * # Safety
 * Arrays must hold `n` elements and `out` must be valid.
 */
enum NdaStatus nda_eer(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Normalized minimum detection cost at target prior `p_target`.
 *
 * # Safety
 * Arrays must hold `n` elements and `out` must be valid.
 */
enum NdaStatus nda_min_dcf(const double *scores,
                           const uint8_t *labels,
                           size_t n,
                           double p_target,
                           double *out);

/**
 * Message for the last failed call on this thread, empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *nda_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nda_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NDA_H */

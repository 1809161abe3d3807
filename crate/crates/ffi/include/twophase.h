/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef TWOPHASE_H
#define TWOPHASE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Fit flag bits reported by [`tp_fit_flags`].
 */
#define TP_FLAG_DEGENERATE_GAMMA_ZERO 1

#define TP_FLAG_SIGMA2_ZERO 2

#define TP_FLAG_BREAKPOINT_AT_BOUNDARY 4

#define TP_FLAG_EMPTY_ACTIVE_SET 8

/**
 * Status codes returned by every fallible function.
 */
typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_INVALID_INPUT = 1,
  TP_STATUS_PRECONDITION = 2,
  TP_STATUS_NON_DIFFERENTIABLE = 3,
  TP_STATUS_SINGULAR_INFORMATION = 4,
  TP_STATUS_NUMERICAL = 5,
  TP_STATUS_NULL_POINTER = 6,
  TP_STATUS_PANIC = 7,
  TP_STATUS_OTHER = 8,
} TpStatus;

/**
 * Which information matrix [`tp_information`] computes.
 */
typedef enum TpInfoKind {
  /**
   * Averages over the observed temperatures.
   */
  TP_INFO_KIND_EMPIRICAL = 0,
  /**
   * Observed information divided by n.
   */
  TP_INFO_KIND_OBSERVED = 1,
  /**
   * Limit under the uniform design on `[lower, upper]`.
   */
  TP_INFO_KIND_ASYMPTOTIC_UNIFORM = 2,
} TpInfoKind;

/**
 * Opaque dataset handle.
 */
typedef struct TpDataset TpDataset;

/**
 * Opaque fit handle.
 */
typedef struct TpFit TpFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies `n` temperatures and responses into a new dataset (sorted by
 * temperature).
 *
 * # Safety
 * `t` and `x` must point to `n` readable doubles; `out` must be writable.
 */
enum TpStatus tp_dataset_new(const double *t, const double *x, uintptr_t n, struct TpDataset **out);

/**
 * Releases a dataset; null is ignored.
 *
 * # Safety
 * `d` must come from [`tp_dataset_new`] and not be used afterwards.
 */
void tp_dataset_free(struct TpDataset *d);

/**
 * Number of observations (0 for null).
 *
 * # Safety
 * `d` must be null or a live dataset handle.
 */
uintptr_t tp_dataset_len(const struct TpDataset *d);

/**
 * Profile maximum-likelihood fit on the domain `[lower, upper]`.
 *
 * # Safety
 * `d` must be a live dataset handle; `out` must be writable.
 */
enum TpStatus tp_fit_mle(const struct TpDataset *d, double lower, double upper, struct TpFit **out);

/**
 * Releases a fit; null is ignored.
 *
 * # Safety
 * `f` must come from [`tp_fit_mle`] and not be used afterwards.
 */
void tp_fit_free(struct TpFit *f);

/**
 * Writes `(gamma, u, sigma2)` of the estimate to `out[0..3]`.
 *
 * # Safety
 * `f` must be a live fit handle; `out` must hold 3 doubles.
 */
enum TpStatus tp_fit_theta(const struct TpFit *f, double *out);

/**
 * Residual sum of squares at the estimate (NaN for null).
 *
 * # Safety
 * `f` must be null or a live fit handle.
 */
double tp_fit_rss(const struct TpFit *f);

/**
 * Maximised log-likelihood (`+inf` for an exact fit, NaN for null).
 *
 * # Safety
 * `f` must be null or a live fit handle.
 */
double tp_fit_loglik(const struct TpFit *f);

/**
 * Bitmask of `TP_FLAG_*` values (0 for a clean fit or null).
 *
 * # Safety
 * `f` must be null or a live fit handle.
 */
uint32_t tp_fit_flags(const struct TpFit *f);

/**
 * Log-likelihood of the data at `(gamma, u, sigma2)`.
 *
 * # Safety
 * `d` must be a live dataset handle; `out` must be writable.
 */
enum TpStatus tp_log_likelihood(const struct TpDataset *d,
                                double gamma,
                                double u,
                                double sigma2,
                                double *out);

/**
 * Score vector at `(gamma, u, sigma2)`; fails at a knot.
 *
 * # Safety
 * `d` must be a live dataset handle; `out` must hold 3 doubles.
 */
enum TpStatus tp_score(const struct TpDataset *d,
                       double gamma,
                       double u,
                       double sigma2,
                       double *out);

/**
 * Information matrix at `(gamma, u, sigma2)` written row-major to `out[0..9]`.
 * `d` may be null for [`TpInfoKind::AsymptoticUniform`].
 *
 * # Safety
 * `d` must be null or a live dataset handle; `out` must hold 9 doubles.
 */
enum TpStatus tp_information(const struct TpDataset *d,
                             enum TpInfoKind kind,
                             double gamma,
                             double u,
                             double sigma2,
                             double lower,
                             double upper,
                             double *out);

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len` bytes) and returns the full message length excluding
 * the terminator; 0 when no error has occurred.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t tp_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWOPHASE_H */

#ifndef QRLAB_H
#define QRLAB_H

/* Generated by cbindgen from the qrlab-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible function in this API.
typedef enum QrStatus {
  // The call succeeded.
  QR_STATUS_OK = 0,
  // A required pointer argument was null.
  QR_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  QR_STATUS_INVALID_UTF8 = 2,
  // An argument was outside its domain or inputs were inconsistent.
  QR_STATUS_INVALID_INPUT = 3,
  // The design matrix does not have full column rank.
  QR_STATUS_RANK_DEFICIENT = 4,
  // A matrix that must be invertible was singular.
  QR_STATUS_SINGULAR = 5,
  // The quantile solver failed to terminate cleanly.
  QR_STATUS_SOLVER_FAILURE = 6,
  // A combinatorial or enumeration budget was exceeded.
  QR_STATUS_BUDGET_EXCEEDED = 7,
  // A file could not be read.
  QR_STATUS_IO_ERROR = 8,
  // Tabular input could not be parsed.
  QR_STATUS_PARSE_ERROR = 9,
  // A caller-provided buffer was too small for the result.
  QR_STATUS_BUFFER_TOO_SMALL = 10,
  // An internal panic was caught at the boundary.
  QR_STATUS_PANIC = 11,
} QrStatus;

// Opaque dataset handle: a fixed design matrix and response vector.
typedef struct QrDataset QrDataset;

// Opaque fit handle: one solved quantile regression.
typedef struct QrFit QrFit;

// A plug-in confidence interval for a linear contrast of the coefficients.
typedef struct QrInterval {
  // Quantile level the interval is for.
  double tau;
  // Point estimate of the contrast a'beta(tau).
  double point;
  // Standard error of the point estimate.
  double se;
  // Lower interval endpoint.
  double lo;
  // Upper interval endpoint.
  double hi;
  // One-sided tail mass alpha; the interval is two-sided level 1 - 2*alpha.
  double alpha;
  // Standard normal quantile z such that P(Z > z) = alpha.
  double z_alpha;
  // Difference-quotient bandwidth actually used (NaN when none applied).
  double bandwidth;
} QrInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version of the library as a static NUL-terminated string.
const char *qr_version(void);

// Copy the current thread's last error message into `buf`.
//
// Returns the number of bytes the full message needs, including the
// terminating NUL; the copy is truncated (but still NUL-terminated) when
// `cap` is smaller. After a successful call the message is the empty
// string, so the return value is 1.
//
// # Safety
// `buf` must be null (to query the required size) or valid for writing
// `cap` bytes.
size_t qr_last_error(char *buf, size_t cap);

// Build a dataset from caller-owned arrays (the data is copied).
//
// `y` holds `n_rows` responses. `x` holds `n_rows * n_covariates` values in
// row-major order; it may be null when `n_covariates` is 0. When
// `add_intercept` is true a leading column of ones is prepended, so the
// fitted dimension is `n_covariates + 1`.
//
// On success writes a new handle to `*out`; release it with
// [`qr_dataset_free`].
//
// # Safety
// `y` must point to `n_rows` doubles, `x` to `n_rows * n_covariates`
// doubles (or be null when `n_covariates` is 0), and `out` to a writable
// pointer slot.
enum QrStatus qr_dataset_from_arrays(const double *y,
                                     const double *x,
                                     size_t n_rows,
                                     size_t n_covariates,
                                     bool add_intercept,
                                     struct QrDataset **out);

// Load a dataset from a CSV file with a header row.
//
// `y_column` names the response. `x_columns` is a comma-separated list of
// covariate columns; null or empty means "no covariates" (an intercept-only
// design when `add_intercept` is true).
//
// On success writes a new handle to `*out`; release it with
// [`qr_dataset_free`].
//
// # Safety
// `path` and `y_column` must be NUL-terminated strings; `x_columns` must be
// null or NUL-terminated; `out` must point to a writable pointer slot.
enum QrStatus qr_dataset_load_csv(const char *path,
                                  const char *y_column,
                                  const char *x_columns,
                                  bool add_intercept,
                                  struct QrDataset **out);

// Number of observations in the dataset (0 for a null handle).
//
// # Safety
// `data` must be null or a live handle from this library.
size_t qr_dataset_rows(const struct QrDataset *data);

// Number of design columns, intercept included (0 for a null handle).
//
// # Safety
// `data` must be null or a live handle from this library.
size_t qr_dataset_cols(const struct QrDataset *data);

// Release a dataset handle. Null is ignored.
//
// # Safety
// `data` must be null or a handle from this library not freed before.
void qr_dataset_free(struct QrDataset *data);

// Solve the quantile regression at level `tau` on `data`.
//
// On success writes a new handle to `*out`; release it with
// [`qr_fit_free`].
//
// # Safety
// `data` must be a live dataset handle and `out` must point to a writable
// pointer slot.
enum QrStatus qr_fit(const struct QrDataset *data, double tau, struct QrFit **out);

// Number of fitted coefficients (0 for a null handle).
//
// # Safety
// `fit` must be null or a live handle from this library.
size_t qr_fit_dim(const struct QrFit *fit);

// Quantile level the fit was solved at (NaN for a null handle).
//
// # Safety
// `fit` must be null or a live handle from this library.
double qr_fit_tau(const struct QrFit *fit);

// Objective value at the optimum (NaN for a null handle).
//
// # Safety
// `fit` must be null or a live handle from this library.
double qr_fit_objective(const struct QrFit *fit);

// Whether the solution is degenerate (more than `dim` near-zero residuals
// or a boundary optimality margin). False for a null handle.
//
// # Safety
// `fit` must be null or a live handle from this library.
bool qr_fit_degenerate(const struct QrFit *fit);

// Copy the fitted coefficients into `buf`.
//
// # Safety
// `fit` must be a live handle and `buf` valid for writing `cap` doubles.
enum QrStatus qr_fit_coefficients(const struct QrFit *fit, double *buf, size_t cap);

// Copy the residuals (one per observation) into `buf`.
//
// # Safety
// `fit` must be a live handle and `buf` valid for writing `cap` doubles.
enum QrStatus qr_fit_residuals(const struct QrFit *fit, double *buf, size_t cap);

// Release a fit handle. Null is ignored.
//
// # Safety
// `fit` must be null or a handle from this library not freed before.
void qr_fit_free(struct QrFit *fit);

// Plug-in confidence interval for the contrast `a'beta(tau)`.
//
// `contrast` may be null (with `contrast_len` 0) to select the first
// coefficient; otherwise its length must equal the design dimension.
// `order` picks the difference-quotient stencil: 1 (first order) or
// 2 (second order). `bandwidth` fixes the quotient bandwidth; pass NaN
// (or any non-positive value) to use the rate-optimal default rule.
//
// # Safety
// `data` must be a live dataset handle, `contrast` null or valid for
// `contrast_len` doubles, and `out` valid for writing one `QrInterval`.
enum QrStatus qr_confidence_interval(const struct QrDataset *data,
                                     double tau,
                                     double alpha,
                                     const double *contrast,
                                     size_t contrast_len,
                                     uint32_t order,
                                     double bandwidth,
                                     struct QrInterval *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QRLAB_H */

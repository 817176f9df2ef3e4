#ifndef COVDIFF_H
#define COVDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CovdiffStatus {
  COVDIFF_STATUS_OK = 0,
  COVDIFF_STATUS_NULL_POINTER = 1,
  COVDIFF_STATUS_INVALID_ARGUMENT = 2,
  COVDIFF_STATUS_DIMENSION = 3,
  COVDIFF_STATUS_NUMERICAL = 4,
  COVDIFF_STATUS_FORMAT = 5,
  COVDIFF_STATUS_MISSING_ARTIFACT = 6,
  COVDIFF_STATUS_IO = 7,
  COVDIFF_STATUS_PANIC = 8,
} CovdiffStatus;

typedef enum CovdiffMethod {
  COVDIFF_METHOD_IDENTITY = 0,
  COVDIFF_METHOD_GAUSSIAN = 1,
  COVDIFF_METHOD_DIFFUSION = 2,
} CovdiffMethod;

/**
 * A noise-prediction network with the schedule it was trained for.
 */
typedef struct CovdiffModel CovdiffModel;

/**
 * Partitioned compressive measurements of one data set.
 */
typedef struct CovdiffProblem CovdiffProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *covdiff_version(void);

/**
 * Length in bytes of the last error message on this thread, excluding the NUL; 0 if none.
 */
size_t covdiff_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to `len - 1` bytes).
 * Returns the number of bytes written excluding the NUL.
 *
 * # Safety
 * `buf` must be valid for `len` bytes of writes, or null with `len == 0`.
 */
size_t covdiff_last_error_message(char *buf, size_t len);

/**
 * Partitions the `l × n` data (one sample per column) into `p` blocks, projects each
 * to `m` dimensions with sensing noise `sigma_n`, and stores the result in `*out`.
 *
 * # Safety
 * `data` must point to `l * n` doubles; `out` must be writable.
 */
enum CovdiffStatus covdiff_problem_new(const double *data,
                                       size_t l,
                                       size_t n,
                                       size_t m,
                                       size_t p,
                                       double sigma_n,
                                       uint64_t seed,
                                       struct CovdiffProblem **out);

/**
 * # Safety
 * `problem` must come from [`covdiff_problem_new`] and not be used afterwards; null is ignored.
 */
void covdiff_problem_free(struct CovdiffProblem *problem);

/**
 * Band count of a problem, or 0 for null.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
size_t covdiff_problem_bands(const struct CovdiffProblem *problem);

/**
 * Loads a schedule JSON and a weight container.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum CovdiffStatus covdiff_model_load(const char *schedule_path,
                                      const char *weights_path,
                                      struct CovdiffModel **out);

/**
 * # Safety
 * `model` must come from [`covdiff_model_load`] and not be used afterwards; null is ignored.
 */
void covdiff_model_free(struct CovdiffModel *model);

/**
 * Runs projected gradient descent with the chosen preconditioner and writes the
 * `l × l` estimate to `out_sigma`. `model` may be null unless `method` is diffusion.
 * `max_iters == 0` keeps the default budget. `out_iters` may be null.
 *
 * # Safety
 * `problem` must be a live handle, `model` null or live, `out_sigma` writable for `l * l` doubles.
 */
enum CovdiffStatus covdiff_estimate(const struct CovdiffProblem *problem,
                                    const struct CovdiffModel *model,
                                    enum CovdiffMethod method,
                                    size_t max_iters,
                                    uint64_t seed,
                                    double *out_sigma,
                                    size_t *out_iters);

/**
 * `(1/l²)·‖a − b‖_F²` for two `l × l` matrices.
 *
 * # Safety
 * `a` and `b` must point to `l * l` doubles; `out` must be writable.
 */
enum CovdiffStatus covdiff_mse(const double *a, const double *b, size_t l, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COVDIFF_H */

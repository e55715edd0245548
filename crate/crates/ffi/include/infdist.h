#ifndef INFDIST_H
#define INFDIST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Sketch method selector for [`idf_project`].
 */
typedef enum IdfSketch {
  IDF_SKETCH_HADAMARD = 0,
  IDF_SKETCH_RADEMACHER = 1,
} IdfSketch;

/**
 * Status codes returned by every fallible function.
 */
typedef enum IdfStatus {
  IDF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IDF_STATUS_NULL_POINTER = 1,
  /**
   * Input failed validation (shape, range, finiteness, format).
   */
  IDF_STATUS_INVALID = 2,
  /**
   * A numerical failure (singular system, iteration cap).
   */
  IDF_STATUS_NUMERICAL = 3,
  /**
   * File could not be read or written.
   */
  IDF_STATUS_IO = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  IDF_STATUS_PANIC = 5,
} IdfStatus;

/**
 * Opaque dense row-major matrix.
 */
typedef struct IdfMatrix IdfMatrix;

/**
 * Opaque solver result.
 */
typedef struct IdfSolution IdfSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next call on
 * this thread.
 */
const char *idf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *idf_version(void);

/**
 * Copies `rows * cols` row-major values into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles; `out` must be writable.
 */
enum IdfStatus idf_matrix_from_data(size_t rows,
                                    size_t cols,
                                    const double *data,
                                    struct IdfMatrix **out);

/**
 * Reads a matrix file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum IdfStatus idf_matrix_read(const char *path, struct IdfMatrix **out);

/**
 * Writes a matrix file; `f32` selects single precision storage.
 *
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum IdfStatus idf_matrix_write(const struct IdfMatrix *m, const char *path, bool f32);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t idf_matrix_rows(const struct IdfMatrix *m);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
size_t idf_matrix_cols(const struct IdfMatrix *m);

/**
 * Row-major data pointer, valid while the handle lives.
 *
 * # Safety
 * `m` must be null or a live handle.
 */
const double *idf_matrix_data(const struct IdfMatrix *m);

/**
 * # Safety
 * `m` must be null or a handle not yet freed.
 */
void idf_matrix_free(struct IdfMatrix *m);

/**
 * First-order scores p = G_S g_T, written into `p_out` (length `source` rows).
 * The target gradient is the normalized mean of the `target` rows.
 *
 * # Safety
 * Handles must be live; `p_out` must have room for `rows(source)` doubles.
 */
enum IdfStatus idf_compute_p(const struct IdfMatrix *source,
                             const struct IdfMatrix *target,
                             bool normalize,
                             double *p_out);

/**
 * Closed-form first-order weights.
 *
 * # Safety
 * `p` must point to `n` doubles; `out` must be writable.
 */
enum IdfStatus idf_solve_first_order(const double *p,
                                     size_t n,
                                     double lambda,
                                     struct IdfSolution **out);

/**
 * Second-order weights via the active-set solver. `q` is n x n.
 *
 * # Safety
 * `p` must point to `n` doubles, `q` must be a live handle, `out` writable.
 */
enum IdfStatus idf_solve_active_set(const double *p,
                                    size_t n,
                                    const struct IdfMatrix *q,
                                    double eta,
                                    double lambda,
                                    struct IdfSolution **out);

/**
 * Tunes lambda so the first-order solution has `k` nonzero weights. `exact`
 * (optional) reports whether exactly `k` was reached.
 *
 * # Safety
 * `p` must point to `n` doubles; `out` writable; `exact` null or writable.
 */
enum IdfStatus idf_tune_lambda(const double *p,
                               size_t n,
                               size_t k,
                               size_t max_iters,
                               struct IdfSolution **out,
                               bool *exact);

/**
 * # Safety
 * `s` must be null or a live handle.
 */
size_t idf_solution_len(const struct IdfSolution *s);

/**
 * Weight vector pointer, valid while the handle lives.
 *
 * # Safety
 * `s` must be null or a live handle.
 */
const double *idf_solution_weights(const struct IdfSolution *s);

/**
 * # Safety
 * `s` must be null or a live handle.
 */
double idf_solution_lambda(const struct IdfSolution *s);

/**
 * # Safety
 * `s` must be null or a live handle.
 */
size_t idf_solution_support_len(const struct IdfSolution *s);

/**
 * # Safety
 * `s` must be null or a handle not yet freed.
 */
void idf_solution_free(struct IdfSolution *s);

/**
 * Projects every row of `m` to `out_dim` columns. `premask` of 0 means none.
 *
 * # Safety
 * `m` must be a live handle; `out` writable.
 */
enum IdfStatus idf_project(const struct IdfMatrix *m,
                           enum IdfSketch method,
                           uint64_t out_dim,
                           uint64_t premask,
                           uint64_t seed,
                           struct IdfMatrix **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INFDIST_H */

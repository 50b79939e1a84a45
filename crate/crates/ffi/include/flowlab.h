#ifndef FLOWLAB_H
#define FLOWLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FlowlabStatus {
  FLOWLAB_STATUS_OK = 0,
  // A required pointer argument was null.
  FLOWLAB_STATUS_NULL_POINTER = 1,
  // An argument was out of range or inconsistent (including buffer lengths).
  FLOWLAB_STATUS_INVALID_ARGUMENT = 2,
  // A dataset or checkpoint file was malformed.
  FLOWLAB_STATUS_FORMAT = 3,
  // Non-finite values, divergence or an oversized enumeration.
  FLOWLAB_STATUS_NUMERIC = 4,
  // A time at or beyond the `1 - t_eps` cap was requested.
  FLOWLAB_STATUS_SINGULARITY = 5,
  // A file could not be read or written.
  FLOWLAB_STATUS_IO = 6,
  // An internal panic was caught.
  FLOWLAB_STATUS_PANIC = 7,
} FlowlabStatus;

// ODE integration scheme for the `flowlab_sample_*` functions.
typedef enum FlowlabMethod {
  FLOWLAB_METHOD_EULER = 0,
  FLOWLAB_METHOD_MIDPOINT = 1,
  FLOWLAB_METHOD_RK4 = 2,
} FlowlabMethod;

// Opaque training set.
typedef struct FlowlabDataset FlowlabDataset;

// Opaque velocity network.
typedef struct FlowlabNet FlowlabNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null if none.
// The pointer stays valid until the next failing call on this thread.
const char *flowlab_last_error(void);

// Forgets the stored error message for this thread.
void flowlab_clear_error(void);

// Two interleaving half-circles with Gaussian noise.
//
// # Safety
// `out` must be a valid pointer to writable handle storage.
enum FlowlabStatus flowlab_dataset_two_moons(size_t n,
                                             double noise_std,
                                             uint64_t seed,
                                             struct FlowlabDataset **out);

// `k`-component unit-variance Gaussian mixture in `dim` dimensions.
//
// # Safety
// `out` must be a valid pointer to writable handle storage.
enum FlowlabStatus flowlab_dataset_gaussian_mixture(size_t n,
                                                    size_t dim,
                                                    size_t k,
                                                    double spread,
                                                    uint64_t seed,
                                                    struct FlowlabDataset **out);

// Builds a dataset from `n x dim` row-major points.
//
// # Safety
// `points` must hold `n * dim` readable doubles; `out` must be writable.
enum FlowlabStatus flowlab_dataset_from_points(const double *points,
                                               size_t n,
                                               size_t dim,
                                               struct FlowlabDataset **out);

// Reads a dataset file.
//
// # Safety
// `file` must be a NUL-terminated string; `out` must be writable.
enum FlowlabStatus flowlab_dataset_load(const char *file, struct FlowlabDataset **out);

// Writes a dataset file.
//
// # Safety
// `dataset` must be a live handle; `file` a NUL-terminated string.
enum FlowlabStatus flowlab_dataset_save(const struct FlowlabDataset *dataset, const char *file);

// Number of points (0 for a null handle).
//
// # Safety
// `dataset` must be null or a live handle.
size_t flowlab_dataset_len(const struct FlowlabDataset *dataset);

// Ambient dimension (0 for a null handle).
//
// # Safety
// `dataset` must be null or a live handle.
size_t flowlab_dataset_dim(const struct FlowlabDataset *dataset);

// Copies the points into `out` (`n * dim` doubles, row-major).
//
// # Safety
// `dataset` must be a live handle; `out` must hold `len` writable doubles.
enum FlowlabStatus flowlab_dataset_points(const struct FlowlabDataset *dataset,
                                          double *out,
                                          size_t len);

// Releases a dataset. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle not yet freed.
void flowlab_dataset_free(struct FlowlabDataset *dataset);

// Evaluates the closed-form optimal velocity at `(x, t)`; `x` and `out`
// have the dataset's dimension.
//
// # Safety
// `dataset` must be a live handle; `x`/`out` must hold `dim` doubles.
enum FlowlabStatus flowlab_exact_velocity(const struct FlowlabDataset *dataset,
                                          const double *x,
                                          size_t dim,
                                          double t,
                                          double t_eps,
                                          double *out);

// EFM regression target at `x_t = (1 - t) x0 + t x_{x1_index}` from a
// batch of `m` points (`x1` plus `m - 1` companions drawn from `seed`).
//
// # Safety
// `dataset` must be a live handle; `x0`/`out` must hold `dim` doubles.
enum FlowlabStatus flowlab_efm_target(const struct FlowlabDataset *dataset,
                                      const double *x0,
                                      size_t dim,
                                      size_t x1_index,
                                      double t,
                                      size_t m,
                                      uint64_t seed,
                                      double t_eps,
                                      double *out);

// Checks the estimator's mean against exhaustive enumeration on one random
// instance; writes the absolute error and whether the variance bound held.
//
// # Safety
// `max_error` and `variance_ok` must be writable.
enum FlowlabStatus flowlab_efm_verify(size_t n,
                                      size_t m,
                                      size_t d,
                                      uint64_t seed,
                                      uint64_t trial,
                                      double *max_error,
                                      bool *variance_ok);

// Loads a network checkpoint; with `use_ema` the EMA weights are returned.
//
// # Safety
// `file` must be a NUL-terminated string; `out` must be writable.
enum FlowlabStatus flowlab_net_load(const char *file, bool use_ema, struct FlowlabNet **out);

// Input/output dimension of a network (0 for a null handle).
//
// # Safety
// `net` must be null or a live handle.
size_t flowlab_net_dim(const struct FlowlabNet *net);

// Learned velocity at `(x, t)`.
//
// # Safety
// `net` must be a live handle; `x`/`out` must hold `dim` doubles.
enum FlowlabStatus flowlab_net_forward(const struct FlowlabNet *net,
                                       const double *x,
                                       size_t dim,
                                       double t,
                                       double *out);

// Releases a network. Null is ignored.
//
// # Safety
// `net` must be null or a handle not yet freed.
void flowlab_net_free(struct FlowlabNet *net);

// Integrates `n_samples` noise starts under the exact field; writes the
// `n_samples x dim` endpoints row-major.
//
// # Safety
// `dataset` must be a live handle; `out` must hold `len` writable doubles.
enum FlowlabStatus flowlab_sample_exact(const struct FlowlabDataset *dataset,
                                        size_t n_samples,
                                        size_t steps,
                                        enum FlowlabMethod method,
                                        uint64_t seed,
                                        double t_eps,
                                        double *out,
                                        size_t len);

// As [`flowlab_sample_exact`] under a learned field.
//
// # Safety
// `net` must be a live handle; `out` must hold `len` writable doubles.
enum FlowlabStatus flowlab_sample_learned(const struct FlowlabNet *net,
                                          size_t n_samples,
                                          size_t steps,
                                          enum FlowlabMethod method,
                                          uint64_t seed,
                                          double t_eps,
                                          double *out,
                                          size_t len);

// Hybrid sampling: the exact field for the first `round(tau * steps)` steps,
// then the learned one.
//
// # Safety
// Both handles must be live; `out` must hold `len` writable doubles.
enum FlowlabStatus flowlab_sample_hybrid(const struct FlowlabDataset *dataset,
                                         const struct FlowlabNet *net,
                                         double tau,
                                         size_t n_samples,
                                         size_t steps,
                                         enum FlowlabMethod method,
                                         uint64_t seed,
                                         double t_eps,
                                         double *out,
                                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWLAB_H */

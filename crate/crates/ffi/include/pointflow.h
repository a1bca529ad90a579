#ifndef POINTFLOW_H
#define POINTFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_POINTER = 1,
  PF_STATUS_INVALID_ARGUMENT = 2,
  PF_STATUS_NUMERICAL = 3,
  PF_STATUS_IO = 4,
  PF_STATUS_CHECKPOINT = 5,
  PF_STATUS_PANIC = 6,
} PfStatus;

// A loaded model. Create with [`pf_model_load`], release with
// [`pf_model_free`].
typedef struct PfModel PfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *pf_last_error(void);

// Load a checkpoint file into a new model handle written to `out`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum PfStatus pf_model_load(const char *path, struct PfModel **out);

// Release a handle from [`pf_model_load`]. Null is ignored.
//
// # Safety
// `model` must come from [`pf_model_load`] and not be freed twice.
void pf_model_free(struct PfModel *model);

// Point dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t pf_model_dim(const struct PfModel *model);

// Latent code dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t pf_model_latent_dim(const struct PfModel *model);

// Sample one shape of `points` points into `out` (`points * dim`
// doubles), in the coordinates of the training data. The result depends
// only on the model and `seed`.
//
// # Safety
// `model` must be a live handle; `out` must hold `points * dim` doubles.
enum PfStatus pf_model_sample(const struct PfModel *model,
                              uintptr_t points,
                              uint64_t seed,
                              double *out);

// Chamfer distance (sum of squared nearest-neighbour distances in both
// directions) between `x` (`nx` points) and `y` (`ny` points).
//
// # Safety
// `x` and `y` must hold `nx * dim` and `ny * dim` doubles; `out` must be
// writable.
enum PfStatus pf_chamfer(const double *x,
                         uintptr_t nx,
                         const double *y,
                         uintptr_t ny,
                         uintptr_t dim,
                         double *out);

// Earth mover's distance between two clouds of `n` points each. With
// `epsilon > 0` the auction approximation (within `n * epsilon` of the
// optimum) is used; with `epsilon == 0` the exact assignment.
//
// # Safety
// `x` and `y` must each hold `n * dim` doubles; `out` must be writable.
enum PfStatus pf_emd(const double *x,
                     const double *y,
                     uintptr_t n,
                     uintptr_t dim,
                     double epsilon,
                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTFLOW_H */

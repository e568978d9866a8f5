#ifndef POINTPWC_H
#define POINTPWC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible entry point.
 */
typedef enum {
  PPWC_STATUS_OK = 0,
  PPWC_STATUS_NULL_POINTER = 1,
  PPWC_STATUS_INVALID_ARGUMENT = 2,
  PPWC_STATUS_CONFIG = 3,
  PPWC_STATUS_TOO_FEW_POINTS = 4,
  PPWC_STATUS_NON_FINITE = 5,
  PPWC_STATUS_CHECKPOINT = 6,
  PPWC_STATUS_IO = 7,
  PPWC_STATUS_PANIC = 8,
} PpwcStatus;

/**
 * Opaque model handle.
 */
typedef struct PpwcModel PpwcModel;

/**
 * Scene flow metrics, same definitions as the `eval` command.
 */
typedef struct {
  double epe3d;
  double acc_strict;
  double acc_relaxed;
  double outlier;
} PpwcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *ppwc_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *ppwc_last_error_message(void);

/**
 * Creates a freshly initialised model. `config_json` is a network config
 * object (null selects the defaults).
 *
 * # Safety
 * `config_json` must be null or a nul-terminated string; `out` must be a
 * valid pointer.
 */
PpwcStatus ppwc_model_new(const char *config_json, uint64_t seed, PpwcModel **out);

/**
 * Loads a checkpoint written by `ppwc_model_save` or the `train` command.
 * `config_json` must describe the same architecture.
 *
 * # Safety
 * String arguments must be null (config only) or nul-terminated; `out` must
 * be a valid pointer.
 */
PpwcStatus ppwc_model_load(const char *config_json, const char *path, PpwcModel **out);

/**
 * Writes the model parameters as a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be nul-terminated.
 */
PpwcStatus ppwc_model_save(const PpwcModel *model_ptr, const char *path);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ppwc_model_free(PpwcModel *model);

/**
 * Smallest cloud size the model accepts.
 *
 * # Safety
 * `model` must be null or a live handle (null returns 0).
 */
size_t ppwc_model_min_points(const PpwcModel *model);

/**
 * Predicts the full-resolution flow of `p` (n1 points) towards `q` (n2
 * points) into `flow_out` (n1 x 3).
 *
 * # Safety
 * Buffers must hold the stated number of rows.
 */
PpwcStatus ppwc_infer(const PpwcModel *model_ptr,
                      const double *p,
                      size_t n1,
                      const double *q,
                      size_t n2,
                      double *flow_out);

/**
 * Compares predicted against ground-truth flow (both n x 3).
 *
 * # Safety
 * Buffers must hold `n` rows; `out` must be a valid pointer.
 */
PpwcStatus ppwc_evaluate(const double *pred, const double *gt, size_t n, PpwcMetrics *out);

/**
 * Chamfer distance between two clouds, the same value the training loss uses.
 *
 * # Safety
 * Buffers must hold the stated number of rows; `out` must be a valid pointer.
 */
PpwcStatus ppwc_chamfer(const double *p, size_t n1, const double *q, size_t n2, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POINTPWC_H */

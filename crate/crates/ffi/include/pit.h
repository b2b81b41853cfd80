#ifndef PIT_H
#define PIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum PitStatus {
  PIT_STATUS_OK = 0,
  PIT_STATUS_NULL_POINTER = 1,
  PIT_STATUS_INVALID_ARGUMENT = 2,
  PIT_STATUS_SHAPE = 3,
  PIT_STATUS_IO = 4,
  PIT_STATUS_FORMAT = 5,
  PIT_STATUS_NON_FINITE = 6,
  PIT_STATUS_RUNTIME = 7,
  PIT_STATUS_PANIC = 8,
} PitStatus;

/**
 * Opaque trained or freshly built model.
 */
typedef struct PitModel PitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *pit_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pit_version(void);

/**
 * Builds an untrained model from run-config text (`key = value` lines) on the
 * configured task's input mesh.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PitStatus pit_model_from_config(const char *config, struct PitModel **out);

/**
 * Loads a checkpoint written by `pit_model_save` or the `pit train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PitStatus pit_model_load(const char *path, struct PitModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum PitStatus pit_model_save(const struct PitModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void pit_model_free(struct PitModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum PitStatus pit_model_param_count(const struct PitModel *model, size_t *out);

/**
 * Spatial dimension, input channels and output channels of the model.
 *
 * # Safety
 * `model` must come from this library; each out pointer must be valid.
 */
enum PitStatus pit_model_shape(const struct PitModel *model,
                               size_t *dim,
                               size_t *input_channels,
                               size_t *output_channels);

/**
 * Evaluates the model on one sample given on arbitrary input points and returns
 * predictions at arbitrary query points. Arrays are row-major: `input` is
 * `n_input x input_channels`, `input_points` is `n_input x dim`, `query_points` is
 * `n_query x dim` and `output` receives `n_query x output_channels` values
 * (`output_len` must equal that product).
 *
 * # Safety
 * All pointers must reference arrays of the stated sizes.
 */
enum PitStatus pit_model_predict(const struct PitModel *model,
                                 const double *input,
                                 const double *input_points,
                                 size_t n_input,
                                 const double *query_points,
                                 size_t n_query,
                                 double *output,
                                 size_t output_len);

/**
 * Number of position-attention heads, i.e. the length `pit_model_lambda_report`
 * fills.
 *
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum PitStatus pit_model_lambda_count(const struct PitModel *model, size_t *out);

/**
 * Writes effective λ and radius `1/sqrt(λ)` per head, in layer order.
 *
 * # Safety
 * `lambda` and `radius` must each hold `len` values.
 */
enum PitStatus pit_model_lambda_report(const struct PitModel *model,
                                       double *lambda,
                                       double *radius,
                                       size_t len);

/**
 * Mean relative l2 error of the model on the test split generated from run-config
 * text, at the configured resolutions.
 *
 * # Safety
 * `model` must come from this library, `config` must be NUL-terminated and `out`
 * valid.
 */
enum PitStatus pit_model_evaluate(const struct PitModel *model, const char *config, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIT_H */

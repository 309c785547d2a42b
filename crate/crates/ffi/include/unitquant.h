#ifndef UNITQUANT_H
#define UNITQUANT_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UqMethod {
  UQ_METHOD_RTN = 0,
  UQ_METHOD_LAYERWISE = 1,
  UQ_METHOD_UNITWISE = 2,
} UqMethod;

typedef enum UqStatus {
  UQ_STATUS_OK = 0,
  UQ_STATUS_NULL_POINTER = 1,
  UQ_STATUS_INVALID_STRING = 2,
  UQ_STATUS_PARAMETER = 3,
  UQ_STATUS_DIMENSION = 4,
  UQ_STATUS_STRUCTURE = 5,
  UQ_STATUS_DATA = 6,
  UQ_STATUS_IO = 7,
  UQ_STATUS_FORMAT = 8,
  UQ_STATUS_NON_FINITE = 9,
  UQ_STATUS_SIZE = 10,
  UQ_STATUS_STATE = 11,
  UQ_STATUS_PANIC = 12,
} UqStatus;

/**
 * Opaque model handle.
 */
typedef struct UqModel UqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *uq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uq_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UqStatus uq_model_load(const char *path, struct UqModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum UqStatus uq_model_save(const struct UqModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void uq_model_free(struct UqModel *model);

/**
 * Number of floats in one input sample.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum UqStatus uq_model_input_len(const struct UqModel *model, size_t *out);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum UqStatus uq_model_classes(const struct UqModel *model, size_t *out);

/**
 * New handle with batch norm folded into the preceding layers.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum UqStatus uq_model_fold(const struct UqModel *model, struct UqModel **out);

/**
 * Logits for `n` samples laid out contiguously in NCHW order.
 *
 * # Safety
 * `inputs` holds `n * input_len` floats; `logits` has room for `logits_len`
 * floats, which must equal `n * classes`.
 */
enum UqStatus uq_model_forward(const struct UqModel *model,
                               const float *inputs,
                               size_t n,
                               float *logits,
                               size_t logits_len);

/**
 * Folds batch norm and quantizes with `method` on `n` calibration samples.
 * `labels` may be null when the configuration does not need them;
 * `config_json` may be null for defaults.
 *
 * # Safety
 * Pointers must be valid for the sizes implied by `n` and the model.
 */
enum UqStatus uq_quantize(const struct UqModel *model,
                          const float *inputs,
                          const uint32_t *labels,
                          size_t n,
                          const char *config_json,
                          enum UqMethod method,
                          struct UqModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNITQUANT_H */

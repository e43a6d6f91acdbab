#ifndef NAKUL_H
#define NAKUL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NakulStatus {
  NAKUL_STATUS_OK = 0,
  NAKUL_STATUS_NULL_POINTER = 1,
  NAKUL_STATUS_INVALID_ARGUMENT = 2,
  NAKUL_STATUS_IO = 3,
  NAKUL_STATUS_FORMAT = 4,
  NAKUL_STATUS_SHAPE = 5,
  NAKUL_STATUS_PANIC = 6,
} NakulStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct NakulModel NakulModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a model that must be released
 * with [`nakul_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum NakulStatus nakul_model_load(const char *path, struct NakulModel **out);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`nakul_model_load`] and not be used afterwards.
 */
void nakul_model_free(struct NakulModel *model);

/**
 * Input shape and class count of a model. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-NULL outputs must be writable.
 */
enum NakulStatus nakul_model_dims(const struct NakulModel *model,
                                  size_t *channels,
                                  size_t *samples,
                                  size_t *classes);

/**
 * Sampling rate (Hz) the model was configured for.
 *
 * # Safety
 * `model` must be a live handle and `rate` writable.
 */
enum NakulStatus nakul_model_rate(const struct NakulModel *model, double *rate);

/**
 * Evaluation-mode logits for `batch` trials.
 *
 * `input` holds `batch × channels × samples` values, row-major;
 * `logits` receives `batch × classes` values. Both lengths are checked.
 *
 * # Safety
 * `input` must point to `input_len` readable doubles and `logits` to
 * `logits_len` writable doubles.
 */
enum NakulStatus nakul_model_predict(const struct NakulModel *model,
                                     const double *input,
                                     size_t batch,
                                     size_t input_len,
                                     double *logits,
                                     size_t logits_len);

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *nakul_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nakul_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NAKUL_H */

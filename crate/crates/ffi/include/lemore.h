#ifndef LEMORE_H
#define LEMORE_H

/* Generated by cbindgen from the lemore-ffi crate. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum LmStatus {
  LM_STATUS_OK = 0,
  LM_STATUS_INVALID_ARGUMENT = 1,
  LM_STATUS_SHAPE = 2,
  LM_STATUS_CONFIG = 3,
  LM_STATUS_IO = 4,
  LM_STATUS_PARSE = 5,
  LM_STATUS_WEIGHTS = 6,
  LM_STATUS_NULL_POINTER = 7,
  LM_STATUS_PANIC = 8,
} LmStatus;

// Opaque model handle.
typedef struct LmModel LmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds the default topology.
//
// # Safety
// `out` must be null or point to writable storage for one handle.
enum LmStatus lm_model_new_default(struct LmModel **out);

// Builds the small toy topology.
//
// # Safety
// Same contract as [`lm_model_new_default`].
enum LmStatus lm_model_new_toy(struct LmModel **out);

// Builds a model from a JSON configuration document.
//
// # Safety
// `json` must be null or a NUL-terminated string; `out` as in
// [`lm_model_new_default`].
enum LmStatus lm_model_from_config_json(const char *json, struct LmModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle from this library not yet freed.
void lm_model_free(struct LmModel *model);

// # Safety
// `model` must be a live handle; `out` writable.
enum LmStatus lm_model_param_count(const struct LmModel *model, uint64_t *out);

// Input height, width and class count of the model.
//
// # Safety
// `model` must be a live handle; the three outputs writable.
enum LmStatus lm_model_geometry(const struct LmModel *model,
                                size_t *height,
                                size_t *width,
                                size_t *num_classes);

// Parameter count and FLOPs (2 per multiply-accumulate) at `height×width`.
//
// # Safety
// `model` must be a live handle; `params` and `flops` writable.
enum LmStatus lm_model_analyze(const struct LmModel *model,
                               size_t height,
                               size_t width,
                               uint64_t *params,
                               uint64_t *flops);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum LmStatus lm_model_load_weights(struct LmModel *model, const char *path);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum LmStatus lm_model_save_weights(const struct LmModel *model, const char *path);

// Per-pixel class ids for a `3×H×W` planar image at the model's input
// size. `image_len` must be `3·H·W` and `labels_len` must be `H·W`.
//
// # Safety
// `image` must point to `image_len` readable doubles and `labels` to
// `labels_len` writable integers.
enum LmStatus lm_model_infer(const struct LmModel *model,
                             const double *image,
                             size_t image_len,
                             uint32_t *labels,
                             size_t labels_len);

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *lm_last_error_message(void);

// Static name of a status code; "unknown" for values outside [`LmStatus`].
const char *lm_status_name(int status);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LEMORE_H */

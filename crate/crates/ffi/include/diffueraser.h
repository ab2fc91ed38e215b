#ifndef DIFFUERASER_H
#define DIFFUERASER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every function.
typedef enum DeStatus {
  DE_STATUS_OK = 0,
  DE_STATUS_NULL_POINTER = 1,
  DE_STATUS_INVALID_ARGUMENT = 2,
  DE_STATUS_CONFIG = 3,
  DE_STATUS_CHECKPOINT_NOT_FOUND = 4,
  DE_STATUS_CHECKPOINT = 5,
  DE_STATUS_RUNTIME = 6,
  DE_STATUS_PANIC = 7,
} DeStatus;

// Opaque loaded model.
typedef struct DeModel DeModel;

// Inference settings; obtain defaults from [`de_config_default`].
typedef struct DeInferenceConfig {
  uint32_t clip_len;
  uint32_t steps;
  uint64_t seed;
  double prior_strength;
  double blur_sigma;
  bool guidance_enabled;
  bool bypass_diffusion;
  uint32_t refine_iters;
  double tol;
  uint32_t history;
} DeInferenceConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *de_last_error(void);

// Library version as a static NUL-terminated string.
const char *de_version(void);

// Writes the default inference settings to `out`.
//
// # Safety
// `out` must be null or point to writable memory for one config.
enum DeStatus de_config_default(struct DeInferenceConfig *out);

// Loads a checkpoint. On success `*out` owns a model to release with [`de_model_free`].
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` null or writable.
enum DeStatus de_model_load(const char *path, struct DeModel **out);

// Releases a model; null is ignored.
//
// # Safety
// `model` must be null or a pointer from [`de_model_load`] not yet freed.
void de_model_free(struct DeModel *model);

// Inpaints `n_frames` frames of `height x width` into `out` (same layout as `frames`).
// `model` may be null when `config->bypass_diffusion` is set.
//
// # Safety
// `frames` and `out` must hold `n_frames * height * width * 3` floats and
// `masks` `n_frames * height * width` bytes; `config` must be valid.
enum DeStatus de_inpaint(const struct DeModel *model,
                         const struct DeInferenceConfig *config,
                         const float *frames,
                         const uint8_t *masks,
                         size_t n_frames,
                         size_t height,
                         size_t width,
                         float *out);

// Serializes the temporal plan as JSON into `*out`; release it with [`de_string_free`].
//
// # Safety
// `out` must be null or writable.
enum DeStatus de_plan_json(size_t n_frames,
                           size_t clip_len,
                           size_t steps,
                           bool guidance_enabled,
                           char **out);

// Releases a string returned by this library; null is ignored.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void de_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFUERASER_H */

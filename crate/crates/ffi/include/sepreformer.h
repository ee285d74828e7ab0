#ifndef SEPREFORMER_H
#define SEPREFORMER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Values match the command-line exit codes.
 */
typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_CONFIG_ERROR = 2,
  SR_STATUS_DATA_ERROR = 3,
  SR_STATUS_NUMERIC_ERROR = 4,
  SR_STATUS_NULL_POINTER = 5,
  SR_STATUS_BUFFER_TOO_SMALL = 6,
  SR_STATUS_PANIC = 7,
} SrStatus;

/**
 * Opaque separator handle.
 */
typedef struct SrModel SrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or null. Valid until
 * the next call on the same thread.
 */
const char *sr_last_error(void);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SrStatus sr_model_load(const char *path, struct SrModel **out);

/**
 * Build a freshly initialized model from a named preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SrStatus sr_model_from_preset(const char *preset, uint64_t seed, struct SrModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void sr_model_free(struct SrModel *model);

/**
 * Speakers produced per call to [`sr_separate`]; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t sr_model_speakers(const struct SrModel *model);

/**
 * Expected input sample rate; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t sr_model_sample_rate(const struct SrModel *model);

/**
 * Inference parameter count; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint64_t sr_model_num_params(const struct SrModel *model);

/**
 * Separate `n` samples into `speakers * n` outputs, speaker-major.
 *
 * # Safety
 * `input` must point to `n` floats and `output` to `output_len` floats.
 */
enum SrStatus sr_separate(const struct SrModel *model,
                          const float *input,
                          size_t n,
                          float *output,
                          size_t output_len);

/**
 * Inference parameter count of a named preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SrStatus sr_preset_param_count(const char *preset, uint64_t *out);

/**
 * Clipped scale-invariant SNR in dB (clip 30 dB).
 *
 * # Safety
 * `reference` and `estimate` must point to `n` floats, `out` to one double.
 */
enum SrStatus sr_si_snr(const float *reference, const float *estimate, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEPREFORMER_H */

#ifndef TRAFFIC_UNET_H
#define TRAFFIC_UNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TuStatus {
  TU_STATUS_OK = 0,
  TU_STATUS_NULL_POINTER = 1,
  TU_STATUS_INVALID_ARGUMENT = 2,
  TU_STATUS_IO = 3,
  TU_STATUS_FORMAT = 4,
  TU_STATUS_SHAPE = 5,
  TU_STATUS_PANIC = 6,
} TuStatus;

typedef enum TuVariant {
  TU_VARIANT_BASE1 = 1,
  TU_VARIANT_BASE2 = 2,
  TU_VARIANT_BASE3 = 3,
  TU_VARIANT_BASE4 = 4,
  TU_VARIANT_ENSEMBLE = 5,
} TuVariant;

/**
 * Loaded day file.
 */
typedef struct TuDayFile TuDayFile;

/**
 * Loaded model checkpoint.
 */
typedef struct TuModel TuModel;

typedef struct TuModelInfo {
  size_t height;
  size_t width;
  size_t in_channels;
  size_t out_channels;
  uint32_t variant;
} TuModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *tu_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from this thread.
 */
const char *tu_last_error(void);

/**
 * Load a checkpoint into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TuStatus tu_model_load(const char *path, struct TuModel **out);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`tu_model_load`] and not be used afterwards.
 */
void tu_model_free(struct TuModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` a valid pointer.
 */
enum TuStatus tu_model_info(const struct TuModel *model, struct TuModelInfo *info);

/**
 * Forward pass on a channel-last `(H, W, in_channels)` input, writing the
 * `(H, W, out_channels)` output.
 *
 * # Safety
 * `input` and `output` must point to `input_len` and `output_len` floats.
 */
enum TuStatus tu_model_forward(const struct TuModel *model,
                               const float *input,
                               size_t input_len,
                               float *output,
                               size_t output_len);

/**
 * Read a day file into a new handle. Direction bytes are validated.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TuStatus tu_dayfile_read(const char *path, struct TuDayFile **out);

/**
 * Release a day-file handle. NULL is ignored.
 *
 * # Safety
 * `day` must come from [`tu_dayfile_read`] and not be used afterwards.
 */
void tu_dayfile_free(struct TuDayFile *day);

/**
 * Frame count and spatial dims of a day file.
 *
 * # Safety
 * `day` must be a live handle; the out pointers must be valid.
 */
enum TuStatus tu_dayfile_dims(const struct TuDayFile *day,
                              size_t *frames,
                              size_t *height,
                              size_t *width);

/**
 * Borrow the raw `(frames, H, W, 3)` bytes. The pointer stays valid while
 * the handle lives.
 *
 * # Safety
 * `day` must be a live handle; `data` and `len` must be valid pointers.
 */
enum TuStatus tu_dayfile_data(const struct TuDayFile *day, const uint8_t **data, size_t *len);

/**
 * Encode the 12 frames starting at `start` as a `(H, W, 72)` model input.
 *
 * # Safety
 * `day` must be a live handle and `out` point to `out_len` floats.
 */
enum TuStatus tu_encode_input(const struct TuDayFile *day,
                              size_t start,
                              float *out,
                              size_t out_len);

/**
 * Decode a `(H, W, 9)` model output into `(3, H, W, 3)` bytes.
 *
 * # Safety
 * `y` must point to `height * width * 9` floats and `out` to `out_len`
 * bytes.
 */
enum TuStatus tu_decode_output(const float *y,
                               size_t height,
                               size_t width,
                               uint8_t *out,
                               size_t out_len);

/**
 * Normalized MSE between two equally sized byte buffers.
 *
 * # Safety
 * `pred` and `truth` must point to `len` bytes; `out` must be valid.
 */
enum TuStatus tu_evaluate(const uint8_t *pred, const uint8_t *truth, size_t len, double *out);

/**
 * Write the shape trace of a full-width model with the given dims and
 * pooling depth as text. `*required` receives the buffer size needed
 * (including the NUL); the text is written only if `buf_len` suffices.
 *
 * # Safety
 * `buf` must point to `buf_len` bytes (or be NULL with `buf_len` 0);
 * `required` must be valid.
 */
enum TuStatus tu_shape_trace(size_t height,
                             size_t width,
                             size_t depth,
                             char *buf,
                             size_t buf_len,
                             size_t *required);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAFFIC_UNET_H */

#ifndef SPALIGN_H
#define SPALIGN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. `SPALIGN_STATUS_OK` is zero.
 */
typedef enum SpalignStatus {
  SPALIGN_STATUS_OK = 0,
  SPALIGN_STATUS_NULL_POINTER = 1,
  SPALIGN_STATUS_INVALID_ARGUMENT = 2,
  SPALIGN_STATUS_SHAPE = 3,
  SPALIGN_STATUS_IO = 4,
  SPALIGN_STATUS_INTEGRITY = 5,
  SPALIGN_STATUS_VERSION = 6,
  SPALIGN_STATUS_CONFIG = 7,
  SPALIGN_STATUS_PARSE = 8,
  SPALIGN_STATUS_CAPACITY = 9,
  SPALIGN_STATUS_NON_FINITE = 10,
  SPALIGN_STATUS_PANIC = 11,
} SpalignStatus;

/**
 * Opaque loaded model; create with `spalign_model_load`, release with
 * `spalign_model_free`.
 */
typedef struct SpalignModel SpalignModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *spalign_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *spalign_version(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new model.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SpalignStatus spalign_model_load(const char *path, struct SpalignModel **out);

/**
 * Releases a model; null is a no-op.
 *
 * # Safety
 * `m` must come from `spalign_model_load` and not be used afterwards.
 */
void spalign_model_free(struct SpalignModel *m);

/**
 * Input side length and feature map shape `[C, H, W]` of the model.
 *
 * # Safety
 * `m` must be a live model; the out pointers must be writable.
 */
enum SpalignStatus spalign_model_shape(const struct SpalignModel *m,
                                       size_t *input_size,
                                       size_t *channels,
                                       size_t *extent);

/**
 * Backbone features of one interleaved 8-bit RGB image of any size; the
 * image is resized and normalized as in training. `out` holds `C * H * W`
 * values.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes and `out` the feature count.
 */
enum SpalignStatus spalign_model_features(const struct SpalignModel *m,
                                          const uint8_t *rgb,
                                          size_t width,
                                          size_t height,
                                          double *out);

/**
 * Aligns support features to query features (both `[C, H, W]` as returned
 * by `spalign_model_features`) through the stages named by `stage`, e.g.
 * `"full"` or `"foe+lsc"`. Writes the aligned support map and the query map
 * after FOE, each `C * H * W` values.
 *
 * # Safety
 * Feature buffers must hold `C * H * W` values; `stage` must be a
 * NUL-terminated string.
 */
enum SpalignStatus spalign_model_align_pair(const struct SpalignModel *m,
                                            const double *support,
                                            const double *query,
                                            const char *stage,
                                            double *aligned_out,
                                            double *query_out);

/**
 * Row-wise softmax of a `rows x cols` matrix.
 *
 * # Safety
 * `x` and `out` must each hold `rows * cols` values; they may alias.
 */
enum SpalignStatus spalign_softmax_rows(const double *x, size_t rows, size_t cols, double *out);

/**
 * Bilinear sampling of a `[C, H, W]` map at normalized `(x, y)` positions
 * (`[Ho, Wo, 2]`, corners at -1 and 1, zero outside). `out` is `[C, Ho, Wo]`.
 *
 * # Safety
 * Buffers must hold the element counts implied by their shapes.
 */
enum SpalignStatus spalign_bilinear_sample(const double *input,
                                           size_t channels,
                                           size_t height,
                                           size_t width,
                                           const double *grid,
                                           size_t out_height,
                                           size_t out_width,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPALIGN_H */

#ifndef TVSEG_H
#define TVSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TvsegStatus {
  TVSEG_STATUS_OK = 0,
  TVSEG_STATUS_NULL_POINTER = 1,
  TVSEG_STATUS_INVALID_ARGUMENT = 2,
  TVSEG_STATUS_IO = 3,
  TVSEG_STATUS_FORMAT = 4,
  TVSEG_STATUS_NUMERIC = 5,
  TVSEG_STATUS_PANIC = 6,
} TvsegStatus;

/**
 * Opaque handle to a trained network.
 */
typedef struct TvsegNetwork TvsegNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or valid for writing `len` bytes.
 */
size_t tvseg_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint. On success `*out` owns a handle to release with
 * [`tvseg_network_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TvsegStatus tvseg_network_load(const char *path, struct TvsegNetwork **out);

/**
 * # Safety
 * `net` must be null or a handle from [`tvseg_network_load`] not yet freed.
 */
void tvseg_network_free(struct TvsegNetwork *net);

/**
 * Number of output classes.
 *
 * # Safety
 * `net` must be a live handle; `classes` must be writable.
 */
enum TvsegStatus tvseg_network_classes(const struct TvsegNetwork *net, size_t *classes);

/**
 * Segments a `3 x height x width` image. `probs` (may be null) receives
 * `classes x height x width` probabilities, `labels` (may be null) the
 * `height x width` argmax.
 *
 * # Safety
 * Buffers must have the sizes above; `net` must be a live handle.
 */
enum TvsegStatus tvseg_network_predict(const struct TvsegNetwork *net,
                                       const double *image,
                                       size_t height,
                                       size_t width,
                                       size_t iterations,
                                       double *probs,
                                       uint8_t *labels);

/**
 * Iterative regularized softmax of `channels x height x width` logits.
 *
 * # Safety
 * `logits` and `out` must each hold `channels * height * width` doubles.
 */
enum TvsegStatus tvseg_reg_softmax(const double *logits,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   double lambda,
                                   double tau,
                                   size_t iterations,
                                   double *out);

/**
 * Iterative regularized ReLU, same layout as [`tvseg_reg_softmax`].
 *
 * # Safety
 * `input` and `out` must each hold `channels * height * width` doubles.
 */
enum TvsegStatus tvseg_reg_relu(const double *input,
                                size_t channels,
                                size_t height,
                                size_t width,
                                double lambda,
                                double tau,
                                size_t iterations,
                                double *out);

/**
 * Mean IoU (percent) and global accuracy (percent) of `pred` against
 * `truth`, both `count` labels long.
 *
 * # Safety
 * `pred` and `truth` must hold `count` bytes; outputs must be writable.
 */
enum TvsegStatus tvseg_segmentation_scores(const uint8_t *pred,
                                           const uint8_t *truth,
                                           size_t count,
                                           size_t classes,
                                           double *miou,
                                           double *accuracy);

/**
 * Regularization effect of a `height x width` label map.
 *
 * # Safety
 * `labels` must hold `height * width` bytes; `re` must be writable.
 */
enum TvsegStatus tvseg_regularization_effect(const uint8_t *labels,
                                             size_t height,
                                             size_t width,
                                             double *re);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TVSEG_H */

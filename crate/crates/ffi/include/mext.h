#ifndef MEXT_H
#define MEXT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum MextStatus {
  MEXT_STATUS_OK = 0,
  MEXT_STATUS_NULL_POINTER = 1,
  MEXT_STATUS_DIMENSION = 2,
  MEXT_STATUS_CONTRACT = 3,
  MEXT_STATUS_CONFIG = 4,
  MEXT_STATUS_DATA = 5,
  MEXT_STATUS_CHECKPOINT = 6,
  MEXT_STATUS_IO = 7,
  /**
   * An output buffer is smaller than the result.
   */
  MEXT_STATUS_BUFFER_TOO_SMALL = 8,
  MEXT_STATUS_PANIC = 9,
} MextStatus;

/**
 * A loaded model; create with [`mext_model_load`], release with
 * [`mext_model_free`].
 */
typedef struct MextModel MextModel;

/**
 * Outcome of early-exit inference on one sequence.
 */
typedef struct MextExitDecision {
  /**
   * 1-based layer the example left at.
   */
  uint32_t exit_layer;
  uint32_t prediction;
  /**
   * Entropy in nats of the exiting prediction.
   */
  double entropy;
} MextExitDecision;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next `mext_*` call on the same thread.
 */
const char *mext_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mext_version(void);

/**
 * Loads a MEXT1 checkpoint from `path` (UTF-8) into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MextStatus mext_model_load(const char *path, struct MextModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`mext_model_load`] and not be used afterwards.
 */
void mext_model_free(struct MextModel *model);

/**
 * Number of transformer layers (and exits); 0 for null.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t mext_model_layers(const struct MextModel *model);

/**
 * Number of classes; 0 for null.
 *
 * # Safety
 * `model` must be null or a live model.
 */
size_t mext_model_classes(const struct MextModel *model);

/**
 * Logits of every exit for one sequence, written row-major as
 * `layers × classes` floats into `out` (capacity `out_len`).
 *
 * # Safety
 * `ids` must point at `len` token ids and `out` at `out_len` floats.
 */
enum MextStatus mext_forward_all_exits(const struct MextModel *model,
                                       const uint32_t *ids,
                                       size_t len,
                                       float *out,
                                       size_t out_len);

/**
 * Early-exit inference at entropy threshold `threshold` (nats).
 *
 * # Safety
 * `ids` must point at `len` token ids and `out` be a valid pointer.
 */
enum MextStatus mext_infer_adaptive(const struct MextModel *model,
                                    const uint32_t *ids,
                                    size_t len,
                                    double threshold,
                                    struct MextExitDecision *out);

/**
 * Entropy in nats of the distribution `probs[0..n]`.
 *
 * # Safety
 * `probs` must point at `n` doubles and `out` be a valid pointer.
 */
enum MextStatus mext_entropy(const double *probs, size_t n, double *out);

/**
 * Gradient regularization of two flat gradients of length `n`: writes
 * `g*` into `g_star` and 1 into `*conflicted` when `g_f · g_s < 0`.
 *
 * # Safety
 * `g_f`, `g_s` and `g_star` must point at `n` doubles; `conflicted` must be
 * valid or null.
 */
enum MextStatus mext_regularize(const double *g_f,
                                const double *g_s,
                                size_t n,
                                double *g_star,
                                int32_t *conflicted);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEXT_H */

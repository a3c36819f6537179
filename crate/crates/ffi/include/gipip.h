#ifndef GIPIP_H
#define GIPIP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GipipStatus {
  GIPIP_STATUS_OK = 0,
  GIPIP_STATUS_NULL_POINTER = 1,
  GIPIP_STATUS_DIMENSION = 2,
  GIPIP_STATUS_ARGUMENT = 3,
  GIPIP_STATUS_CONFIG = 4,
  GIPIP_STATUS_FORMAT = 5,
  GIPIP_STATUS_NUMERIC = 6,
  GIPIP_STATUS_PARTITION_VIOLATION = 7,
  GIPIP_STATUS_CONTRACT = 8,
  GIPIP_STATUS_IO = 9,
  GIPIP_STATUS_PANIC = 10,
} GipipStatus;

/**
 * The outcome of an attack.
 */
typedef struct GipipAttackResult GipipAttackResult;

/**
 * A trained anomaly-score auto-encoder.
 */
typedef struct GipipAutoEncoder GipipAutoEncoder;

/**
 * A classifier θ_g.
 */
typedef struct GipipClassifier GipipClassifier;

/**
 * A gradient shared by a client, with its labels and model fingerprint.
 */
typedef struct GipipGradient GipipGradient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *gipip_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gipip_version(void);

/**
 * Kaiming-uniform classifier. `arch` is "dense1", "mlp2" or "convnet".
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GipipStatus gipip_classifier_new(const char *arch,
                                      size_t channels,
                                      size_t height,
                                      size_t width,
                                      size_t num_classes,
                                      uint64_t seed,
                                      struct GipipClassifier **out);

/**
 * Number of scalar parameters, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t gipip_classifier_param_count(const struct GipipClassifier *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void gipip_classifier_free(struct GipipClassifier *model);

/**
 * Loads an auto-encoder model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GipipStatus gipip_autoencoder_load(const char *path, struct GipipAutoEncoder **out);

/**
 * # Safety
 * `ae` must be NULL or a handle not yet freed.
 */
void gipip_autoencoder_free(struct GipipAutoEncoder *ae);

/**
 * Client step: gradient of the mean cross-entropy of `n` images.
 *
 * # Safety
 * `images` must hold `n·C·H·W` values and `labels` `n` values.
 */
enum GipipStatus gipip_client_gradient(const struct GipipClassifier *model,
                                       const double *images_ptr,
                                       const size_t *labels,
                                       size_t n,
                                       struct GipipGradient **out);

/**
 * Length of the flattened gradient, or 0 for NULL.
 *
 * # Safety
 * `grad` must be NULL or a live handle.
 */
size_t gipip_gradient_len(const struct GipipGradient *grad);

/**
 * Copies the flattened gradient into `buf` of exactly `len` values.
 *
 * # Safety
 * `buf` must be writable for `len` values.
 */
enum GipipStatus gipip_gradient_copy(const struct GipipGradient *grad, double *buf, size_t len);

/**
 * # Safety
 * `grad` must be NULL or a handle not yet freed.
 */
void gipip_gradient_free(struct GipipGradient *grad);

/**
 * Reconstructs the batch behind `grad`. `method` is "gipip", "ig" or
 * "dlg"; "gipip" needs `ae`, the others need `ae` to be NULL. Other
 * settings take their per-method defaults.
 *
 * # Safety
 * Handles must be live; `method` must be a NUL-terminated string.
 */
enum GipipStatus gipip_attack_run(const char *method,
                                  size_t iterations,
                                  uint64_t seed,
                                  const struct GipipClassifier *model,
                                  const struct GipipGradient *grad,
                                  const struct GipipAutoEncoder *ae,
                                  struct GipipAttackResult **out);

/**
 * Number of values in the recovered batch, or 0 for NULL.
 *
 * # Safety
 * `result` must be NULL or a live handle.
 */
size_t gipip_attack_result_len(const struct GipipAttackResult *result);

/**
 * Copies the recovered NCHW batch into `buf` of exactly `len` values.
 *
 * # Safety
 * `buf` must be writable for `len` values.
 */
enum GipipStatus gipip_attack_result_copy(const struct GipipAttackResult *result,
                                          double *buf,
                                          size_t len);

/**
 * Final unweighted gradient-matching term of the selected restart.
 *
 * # Safety
 * `result` must be a live handle and `out` writable.
 */
enum GipipStatus gipip_attack_result_grad_loss(const struct GipipAttackResult *result, double *out);

/**
 * # Safety
 * `result` must be NULL or a handle not yet freed.
 */
void gipip_attack_result_free(struct GipipAttackResult *result);

/**
 * PSNR with peak 1 between two equal-length buffers; +inf when identical.
 *
 * # Safety
 * `a` and `b` must hold `len` values; `out` must be writable.
 */
enum GipipStatus gipip_psnr(const double *a, const double *b, size_t len, double *out);

/**
 * SSIM of two CHW images (11×11 Gaussian window, σ = 1.5).
 *
 * # Safety
 * `a` and `b` must hold `c·h·w` values; `out` must be writable.
 */
enum GipipStatus gipip_ssim(const double *a,
                            const double *b,
                            size_t c,
                            size_t h,
                            size_t w,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GIPIP_H */

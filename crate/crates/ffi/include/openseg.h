#ifndef OPENSEG_H
#define OPENSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OpensegStatus {
  OPENSEG_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or out-of-range argument.
   */
  OPENSEG_STATUS_INVALID_ARGUMENT = 1,
  OPENSEG_STATUS_IO = 2,
  /**
   * Malformed file or tensor.
   */
  OPENSEG_STATUS_FORMAT = 3,
  /**
   * Invalid configuration (method name, class id, ...).
   */
  OPENSEG_STATUS_CONFIG = 4,
  OPENSEG_STATUS_MISSING_ARTIFACT = 5,
  /**
   * Fitting or scoring failed numerically.
   */
  OPENSEG_STATUS_NUMERIC = 6,
  /**
   * Internal panic; the handle involved should not be reused.
   */
  OPENSEG_STATUS_PANIC = 7,
} OpensegStatus;

/**
 * Fitted scorer for one held-out class.
 */
typedef struct OpensegModel OpensegModel;

/**
 * A loaded or generated scene.
 */
typedef struct OpensegScene OpensegScene;

/**
 * Score map and prior prediction of one scene.
 */
typedef struct OpensegScores OpensegScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on the same thread.
 */
const char *openseg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *openseg_version(void);

/**
 * Reads the scene directory `path` (containing `scene.json`).
 */
enum OpensegStatus openseg_scene_read(const char *path, struct OpensegScene **out);

enum OpensegStatus openseg_scene_write(const struct OpensegScene *scene, const char *path);

/**
 * Generates synthetic scene `index` of the world described by the
 * arguments (default layers, stripe layout, no label noise).
 */
enum OpensegStatus openseg_synth_scene(size_t classes,
                                       size_t size,
                                       double separation,
                                       uint64_t seed,
                                       uint64_t index,
                                       struct OpensegScene **out);

/**
 * Height, width and class count of a scene. Any output may be null.
 */
enum OpensegStatus openseg_scene_dims(const struct OpensegScene *scene,
                                      size_t *height,
                                      size_t *width,
                                      size_t *classes);

void openseg_scene_free(struct OpensegScene *scene);

/**
 * Fits `method` ("softmax", "openfcn", "openpcs", "openipcs") on `n`
 * scenes with class `uuc` held out (`uuc < 0`: all classes known). Other
 * hyperparameters take their defaults; `components` 0 keeps the default.
 */
enum OpensegStatus openseg_model_fit(const struct OpensegScene *const *scenes,
                                     size_t n,
                                     const char *method,
                                     int64_t uuc,
                                     size_t components,
                                     uint64_t seed,
                                     struct OpensegModel **out);

/**
 * Saves a model into the existing directory `dir`.
 */
enum OpensegStatus openseg_model_save(const struct OpensegModel *model, const char *dir);

enum OpensegStatus openseg_model_load(const char *dir, struct OpensegModel **out);

/**
 * Number of known classes the model predicts.
 */
enum OpensegStatus openseg_model_num_known(const struct OpensegModel *model, size_t *out);

void openseg_model_free(struct OpensegModel *model);

enum OpensegStatus openseg_score(const struct OpensegModel *model,
                                 const struct OpensegScene *scene,
                                 struct OpensegScores **out);

/**
 * Copies the knownness scores (`len` must equal height * width, raster
 * order) and prior class ids. Either output may be null.
 */
enum OpensegStatus openseg_scores_copy(const struct OpensegScores *scores,
                                       double *out_scores,
                                       uint32_t *out_prior,
                                       size_t len);

enum OpensegStatus openseg_scores_dims(const struct OpensegScores *scores,
                                       size_t *height,
                                       size_t *width);

void openseg_scores_free(struct OpensegScores *scores);

/**
 * ROC AUC of detecting `unknown[i] != 0` by low `scores[i]`.
 */
enum OpensegStatus openseg_auc(const double *scores, const uint8_t *unknown, size_t n, double *out);

/**
 * Threshold reaching at least `tpr` of the unknown pixels under the flag
 * rule `score <= threshold`.
 */
enum OpensegStatus openseg_calibrate(const double *scores,
                                     const uint8_t *unknown,
                                     size_t n,
                                     double tpr,
                                     double *out_threshold);

/**
 * Cohen's kappa of a `k x k` row-major confusion matrix (rows = truth).
 */
enum OpensegStatus openseg_kappa(const uint64_t *counts, size_t k, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPENSEG_H */

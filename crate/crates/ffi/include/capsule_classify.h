#ifndef CAPSULE_CLASSIFY_H
#define CAPSULE_CLASSIFY_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_POINTER = 1,
  CC_STATUS_INVALID_ARGUMENT = 2,
  CC_STATUS_IO = 3,
  CC_STATUS_PARSE = 4,
  CC_STATUS_CHECKPOINT = 5,
  CC_STATUS_SHAPE = 6,
  CC_STATUS_UNDEFINED = 7,
  CC_STATUS_PANIC = 8,
} CcStatus;

/**
 * A loaded checkpoint.
 */
typedef struct CcModel CcModel;

/**
 * A seeded balanced sampler over a label vector.
 */
typedef struct CcSampler CcSampler;

typedef struct CcAggregateMetrics {
  double balanced_accuracy;
  double mean_auc;
  double combined_score;
  double macro_precision;
  double macro_f1;
  double macro_specificity;
} CcAggregateMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cc_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *cc_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

/**
 * # Safety
 * `model` must come from [`cc_model_load`] and not be used afterwards. NULL is ignored.
 */
void cc_model_free(struct CcModel *model);

/**
 * Number of classes, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t cc_model_num_classes(const struct CcModel *model);

/**
 * Feature vector length, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t cc_model_input_dim(const struct CcModel *model);

/**
 * Name of class `index`, owned by the model; NULL when out of range.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
const char *cc_model_class_name(const struct CcModel *model, size_t index);

/**
 * Class probabilities for `rows` feature vectors of `cols` values each
 * (row-major). `out` receives `rows * num_classes` values.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
enum CcStatus cc_model_predict_features(const struct CcModel *model,
                                        const double *features,
                                        size_t rows,
                                        size_t cols,
                                        double *out,
                                        size_t out_len);

/**
 * Class probabilities for one interleaved RGB image with values in `[0, 1]`,
 * using the checkpoint's evaluation transform. `out` receives `num_classes` values.
 *
 * # Safety
 * `rgb` must hold `3 * width * height` values and `out` `out_len`.
 */
enum CcStatus cc_model_predict_image(const struct CcModel *model,
                                     const double *rgb,
                                     size_t width,
                                     size_t height,
                                     double *out,
                                     size_t out_len);

/**
 * Multi-class focal loss over `rows` logit vectors of `cols` classes.
 * `alpha` may be NULL (all ones) or hold `cols` weights. `per_sample`
 * (`rows` values) and `grad` (`rows * cols`) are optional. With `mean`
 * nonzero the total and gradient are averaged over rows.
 *
 * # Safety
 * Non-NULL buffers must hold the stated number of elements.
 */
enum CcStatus cc_focal_loss(const double *logits,
                            size_t rows,
                            size_t cols,
                            const size_t *targets,
                            const double *alpha,
                            double gamma,
                            bool mean,
                            double *total,
                            double *per_sample,
                            double *grad);

/**
 * One-vs-rest ROC AUC with tie-aware ranks. Returns `Undefined` when one
 * side is empty.
 *
 * # Safety
 * `scores` and `positive` must hold `n` elements; `out` must be valid.
 */
enum CcStatus cc_auc(const double *scores, const bool *positive, size_t n, double *out);

/**
 * `(balanced_accuracy + mean_auc) / 2`.
 *
 * # Safety
 * `out` must be valid.
 */
enum CcStatus cc_combined_score(double balanced_accuracy, double mean_auc, double *out);

/**
 * Aggregate metrics of a `rows x cols` probability matrix against labels.
 *
 * # Safety
 * `probs` must hold `rows * cols` values, `truth` `rows`, and `out` be valid.
 */
enum CcStatus cc_evaluate(const double *probs,
                          size_t rows,
                          size_t cols,
                          const size_t *truth,
                          struct CcAggregateMetrics *out);

/**
 * Cell-wise mean of `members` probability matrices, each `rows x cols`,
 * stored back to back. The result does not depend on member order.
 *
 * # Safety
 * `probs` must hold `members * rows * cols` values and `out` `rows * cols`.
 */
enum CcStatus cc_ensemble_average(const double *probs,
                                  size_t members,
                                  size_t rows,
                                  size_t cols,
                                  double *out);

/**
 * Sampler giving every class with records equal total mass.
 *
 * # Safety
 * `labels` must hold `n` values and `out` be valid.
 */
enum CcStatus cc_sampler_new(const size_t *labels,
                             size_t n,
                             size_t classes,
                             uint64_t seed,
                             struct CcSampler **out);

/**
 * Draws `n` record indices (with replacement). Successive calls continue
 * a deterministic sequence.
 *
 * # Safety
 * `sampler` must be live and `out` hold `n` values.
 */
enum CcStatus cc_sampler_draw(struct CcSampler *sampler, size_t n, size_t *out);

/**
 * # Safety
 * `sampler` must come from [`cc_sampler_new`] and not be used afterwards. NULL is ignored.
 */
void cc_sampler_free(struct CcSampler *sampler);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPSULE_CLASSIFY_H */

#ifndef NORMLINE_H
#define NORMLINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NlSplit {
  NL_SPLIT_TRAIN = 0,
  NL_SPLIT_VALID = 1,
  NL_SPLIT_TEST = 2,
} NlSplit;

/**
 * Result code of every fallible call.
 */
typedef enum NlStatus {
  NL_STATUS_OK = 0,
  NL_STATUS_NULL_POINTER = 1,
  NL_STATUS_INVALID_ARGUMENT = 2,
  NL_STATUS_CONFIG = 3,
  NL_STATUS_DATA = 4,
  NL_STATUS_CHECKPOINT = 5,
  NL_STATUS_TRAIN = 6,
  NL_STATUS_BUFFER_TOO_SMALL = 7,
  NL_STATUS_PANIC = 8,
} NlStatus;

/**
 * Opaque dataset handle: schema plus train/valid/test splits.
 */
typedef struct NlDataset NlDataset;

/**
 * Opaque model handle.
 */
typedef struct NlModel NlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nl_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next `nl_*` call on the same thread.
 */
const char *nl_last_error(void);

/**
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NlStatus nl_dataset_load(const char *dir, struct NlDataset **out);

/**
 * Generates a synthetic long-tail dataset and splits it 8:1:1 with `seed`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NlStatus nl_dataset_synthetic(size_t samples,
                                   size_t categorical_fields,
                                   size_t numerical_fields,
                                   size_t vocab_size,
                                   double zipf_exponent,
                                   uint64_t seed,
                                   struct NlDataset **out);

/**
 * # Safety
 * `ds` must be a handle from this library or null; it is invalid afterwards.
 */
void nl_dataset_free(struct NlDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle and `out` a valid pointer.
 */
enum NlStatus nl_dataset_len(const struct NlDataset *ds, enum NlSplit which, size_t *out);

/**
 * # Safety
 * `ds` must be a live handle and `dir` a NUL-terminated string.
 */
enum NlStatus nl_dataset_save(const struct NlDataset *ds, const char *dir);

/**
 * Builds a model for the dataset's schema. `model_toml` is the body of a
 * `[model]` table (may be empty for defaults).
 *
 * # Safety
 * `ds` must be a live handle, `model_toml` a NUL-terminated string and
 * `out` a valid pointer.
 */
enum NlStatus nl_model_build(const struct NlDataset *ds,
                             const char *model_toml,
                             uint64_t seed,
                             struct NlModel **out);

/**
 * NormDNN for the dataset's schema. `numerical_layer_norm` selects
 * LayerNorm instead of VO-LN for numerical fields.
 *
 * # Safety
 * `ds` must be a live handle, `hidden` must point to `n_hidden` widths and
 * `out` must be a valid pointer.
 */
enum NlStatus nl_model_build_norm_dnn(const struct NlDataset *ds,
                                      size_t embedding_dim,
                                      const size_t *hidden,
                                      size_t n_hidden,
                                      bool numerical_layer_norm,
                                      uint64_t seed,
                                      struct NlModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NlStatus nl_model_load(const char *path, struct NlModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum NlStatus nl_model_save(const struct NlModel *model, const char *path);

/**
 * # Safety
 * `model` must be a handle from this library or null; it is invalid afterwards.
 */
void nl_model_free(struct NlModel *model);

/**
 * Eval-mode click probabilities for every row of a split. `out` must hold
 * at least as many values as the split has rows; `written` receives the
 * row count either way.
 *
 * # Safety
 * Handles must be live; `out` must point to `capacity` doubles and
 * `written` must be a valid pointer.
 */
enum NlStatus nl_model_predict(const struct NlModel *model,
                               const struct NlDataset *ds,
                               enum NlSplit which,
                               double *out,
                               size_t capacity,
                               size_t *written);

/**
 * Trains on the train split with early stopping on the valid split and
 * replaces the model by its best epoch. `train_toml` is the body of a
 * `[train]` table.
 *
 * # Safety
 * Handles must be live, `train_toml` NUL-terminated, and
 * `best_valid_auc` a valid pointer or null.
 */
enum NlStatus nl_model_train(struct NlModel *model,
                             const struct NlDataset *ds,
                             const char *train_toml,
                             double *best_valid_auc);

/**
 * Rank-based AUC; labels must be 0 or 1 and both classes present.
 *
 * # Safety
 * `scores` and `labels` must point to `n` doubles; `out` must be valid.
 */
enum NlStatus nl_auc(const double *scores, const double *labels, size_t n, double *out);

/**
 * Variance-only LayerNorm of a row-major `rows × cols` matrix.
 *
 * # Safety
 * `x` and `out` must each point to `rows * cols` doubles.
 */
enum NlStatus nl_vo_ln_forward(const double *x, size_t rows, size_t cols, double eps, double *out);

/**
 * Diagonal of the VO-LN Jacobian for one vector.
 *
 * # Safety
 * `x` and `out` must each point to `n` doubles.
 */
enum NlStatus nl_vo_ln_diag_derivative(const double *x, size_t n, double eps, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NORMLINE_H */

#ifndef DUADEEP_H
#define DUADEEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call. Values equal the CLI exit codes.
typedef enum DdStatus {
  DD_STATUS_OK = 0,
  // A required pointer argument was null.
  DD_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not UTF-8.
  DD_STATUS_INVALID_UTF8 = 2,
  DD_STATUS_IO = 3,
  DD_STATUS_FORMAT = 4,
  DD_STATUS_NO_RECORDS_RETAINED = 5,
  DD_STATUS_SPLIT_INFEASIBLE = 6,
  DD_STATUS_CONFIG = 7,
  DD_STATUS_MISSING_EMBEDDING = 8,
  DD_STATUS_NON_FINITE = 9,
  DD_STATUS_GRAD_CHECK_FAILED = 10,
  // A value or record outside the accepted domain.
  DD_STATUS_DOMAIN = 11,
  DD_STATUS_UNDEFINED_METRIC = 12,
  DD_STATUS_CONTRACT = 70,
  // A Rust panic was caught at the boundary.
  DD_STATUS_INTERNAL = 99,
} DdStatus;

// A loaded embedding file.
typedef struct DdEmbeddings DdEmbeddings;

// A loaded checkpoint.
typedef struct DdModel DdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *dd_version(void);

// Message for the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *dd_last_error(void);

// Loads a checkpoint of either precision. On success `*out` owns a handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DdStatus dd_model_load(const char *path, struct DdModel **out);

// # Safety
// `model` must come from [`dd_model_load`] and not be freed twice. Null is
// ignored.
void dd_model_free(struct DdModel *model);

// Embedding width the model expects; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t dd_model_d_e(const struct DdModel *model);

// # Safety
// `model` must be null or a live handle.
uintptr_t dd_model_param_count(const struct DdModel *model);

// Standardized score for one pair of row-major `rows x d_e` embedding
// matrices, `d_e` being [`dd_model_d_e`].
//
// # Safety
// `antigen` must point to `antigen_rows * d_e` floats, likewise `antibody`;
// `out` must be valid.
enum DdStatus dd_model_predict(const struct DdModel *model,
                               const float *antigen,
                               uintptr_t antigen_rows,
                               const float *antibody,
                               uintptr_t antibody_rows,
                               double *out);

// Maps a standardized score back to pK_d with the checkpoint's scaler.
//
// # Safety
// `model` must be a live handle and `out` valid.
enum DdStatus dd_model_to_pkd(const struct DdModel *model, double standardized, double *out);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DdStatus dd_embeddings_load(const char *path, struct DdEmbeddings **out);

// # Safety
// `store` must come from [`dd_embeddings_load`] and not be freed twice.
void dd_embeddings_free(struct DdEmbeddings *store);

// Number of sequences in the file; 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
uintptr_t dd_embeddings_len(const struct DdEmbeddings *store);

// # Safety
// `store` must be null or a live handle.
uintptr_t dd_embeddings_d_e(const struct DdEmbeddings *store);

// Cleans the raw sequences, looks both proteins up in `store` and predicts.
// `out_pkd` may be null; otherwise it receives the pK_d (which requires a
// scaler in the checkpoint).
//
// # Safety
// Handles must be live, strings NUL-terminated, `out_standardized` valid.
enum DdStatus dd_predict_sequences(const struct DdModel *model,
                                   const struct DdEmbeddings *store,
                                   const char *antigen,
                                   const char *heavy,
                                   const char *light,
                                   double *out_standardized,
                                   double *out_pkd);

// pK_d = 9 - log10(K_d in nM), for K_d inside the accepted range.
//
// # Safety
// `out` must be valid.
enum DdStatus dd_kd_to_pkd(double kd_nm, double *out);

double dd_pkd_to_kd(double pkd);

// # Safety
// `pred` and `target` must hold `n` values; `out` must be valid.
enum DdStatus dd_rmse(const double *pred, const double *target, uintptr_t n, double *out);

// # Safety
// As [`dd_rmse`].
enum DdStatus dd_mae(const double *pred, const double *target, uintptr_t n, double *out);

// # Safety
// As [`dd_rmse`].
enum DdStatus dd_r2(const double *pred, const double *target, uintptr_t n, double *out);

// # Safety
// `x` and `y` must hold `n` values; `out` must be valid.
enum DdStatus dd_pearson(const double *x, const double *y, uintptr_t n, double *out);

// # Safety
// As [`dd_pearson`].
enum DdStatus dd_spearman(const double *x, const double *y, uintptr_t n, double *out);

// ROC AUC; a nonzero label byte marks a positive.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be valid.
enum DdStatus dd_roc_auc(const double *scores, const uint8_t *labels, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUADEEP_H */

#ifndef FAIRMC_H
#define FAIRMC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define FAIRMC_PENALTY_NONE 0

#define FAIRMC_PENALTY_DEE 1

#define FAIRMC_PENALTY_DER 2

#define FAIRMC_PENALTY_UGF 3

#define FAIRMC_PENALTY_CVS 4

#define FAIRMC_PENALTY_VAL 5

#define FAIRMC_PENALTY_DEE_COND_Y 6

#define FAIRMC_PENALTY_COV 7

typedef enum FairmcStatus {
  FAIRMC_STATUS_OK = 0,
  FAIRMC_STATUS_NULL_POINTER = 1,
  FAIRMC_STATUS_INVALID_ARGUMENT = 2,
  FAIRMC_STATUS_UNSUPPORTED = 3,
  FAIRMC_STATUS_PARSE = 4,
  FAIRMC_STATUS_IO = 5,
  FAIRMC_STATUS_DIVERGENCE = 6,
  FAIRMC_STATUS_PANIC = 7,
} FairmcStatus;

/*
 A rating dataset with its group labels.
 */
typedef struct FairmcDataset FairmcDataset;

/*
 A trained factor model and the split it was trained on.
 */
typedef struct FairmcModel FairmcModel;

typedef struct FairmcSyntheticConfig {
  uint64_t n;
  uint64_t m;
  uint64_t rank;
  /*
   Preference probability by (user group, item group).
   */
  double p[2][2];
  /*
   Observation probability by (user group, item group).
   */
  double q[2][2];
  uint64_t seed;
} FairmcSyntheticConfig;

typedef struct FairmcTrainOptions {
  /*
   One of the `FAIRMC_PENALTY_*` constants.
   */
  uint32_t penalty;
  double lambda;
  /*
   Preference threshold; NaN selects the dataset default.
   */
  double tau;
  double bandwidth;
  double huber_delta;
  uint64_t rank;
  uint64_t iterations;
  double learning_rate;
  double init_scale;
  /*
   Seeds both the train/test split and the initialization.
   */
  uint64_t seed;
  double train_fraction;
} FairmcTrainOptions;

/*
 Metrics of a model; NaN marks a measure that is undefined for the groups.
 */
typedef struct FairmcMetrics {
  double rmse;
  double dee;
  double der;
  double ugf;
  double cvs;
  double val;
  double dee_cond_y;
} FairmcMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next failing call on the same thread.
 */
const char *fairmc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *fairmc_version(void);

struct FairmcSyntheticConfig fairmc_synthetic_config_default(void);

/*
 # Safety
 `config` must be valid for reads and `out` valid for writes.
 */
enum FairmcStatus fairmc_dataset_synthetic(const struct FairmcSyntheticConfig *config,
                                           struct FairmcDataset **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum FairmcStatus fairmc_dataset_load(const char *path, struct FairmcDataset **out);

/*
 # Safety
 `dataset` must come from this library; `path` must be NUL-terminated.
 */
enum FairmcStatus fairmc_dataset_save(const struct FairmcDataset *dataset, const char *path);

/*
 # Safety
 `dataset` must be valid; `n_users`, `n_items` and `n_observed` may each be null.
 */
enum FairmcStatus fairmc_dataset_dims(const struct FairmcDataset *dataset,
                                      uint64_t *n_users,
                                      uint64_t *n_items,
                                      uint64_t *n_observed);

/*
 # Safety
 `dataset` must come from this library and not be used afterwards. Null is ignored.
 */
void fairmc_dataset_free(struct FairmcDataset *dataset);

/*
 Defaults: unfair model, rank 20, 1000 Adam steps, 90/10 split.
 */
struct FairmcTrainOptions fairmc_train_options_default(void);

/*
 Train a factor model on the training part of `dataset`.

 # Safety
 `dataset` and `options` must be valid; `out` must be valid for writes.
 */
enum FairmcStatus fairmc_train_mf(const struct FairmcDataset *dataset,
                                  const struct FairmcTrainOptions *options,
                                  struct FairmcModel **out);

/*
 # Safety
 `model` must be valid; `n_users` and `n_items` may each be null.
 */
enum FairmcStatus fairmc_model_dims(const struct FairmcModel *model,
                                    uint64_t *n_users,
                                    uint64_t *n_items);

/*
 Write the full predicted matrix, row-major, into `out[0..len]`;
 `len` must equal users times items.

 # Safety
 `model` must be valid and `out` valid for `len` writes.
 */
enum FairmcStatus fairmc_model_predict(const struct FairmcModel *model, double *out, size_t len);

/*
 Evaluate `model` on `dataset` with the split and threshold it was trained with.

 # Safety
 All pointers must be valid.
 */
enum FairmcStatus fairmc_evaluate(const struct FairmcDataset *dataset,
                                  const struct FairmcModel *model,
                                  struct FairmcMetrics *out);

/*
 # Safety
 `model` must come from this library and not be used afterwards. Null is ignored.
 */
void fairmc_model_free(struct FairmcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRMC_H */

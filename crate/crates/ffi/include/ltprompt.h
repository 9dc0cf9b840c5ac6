#ifndef LTPROMPT_H
#define LTPROMPT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LtStatus {
  LT_STATUS_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  LT_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration or dataset validation failed.
   */
  LT_STATUS_VALIDATION = 2,
  /**
   * Non-finite loss or gradient, or a degenerate embedding.
   */
  LT_STATUS_NUMERICAL = 3,
  /**
   * File system or serialization failure.
   */
  LT_STATUS_IO = 4,
  /**
   * The requested quantity is undefined (no positives, or an empty class group).
   */
  LT_STATUS_UNDEFINED = 5,
  /**
   * Output buffer too small.
   */
  LT_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * Internal panic; the handle involved should be considered unusable.
   */
  LT_STATUS_PANIC = 7,
} LtStatus;

typedef enum LtGroup {
  LT_GROUP_TOTAL = 0,
  LT_GROUP_HEAD = 1,
  LT_GROUP_MEDIUM = 2,
  LT_GROUP_TAIL = 3,
} LtGroup;

/**
 * Opaque multi-label dataset.
 */
typedef struct LtDataset LtDataset;

/**
 * Opaque result of a training run.
 */
typedef struct LtRun LtRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *lt_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void lt_string_free(char *s);

/**
 * Generates the training split for a synthetic configuration given as a
 * JSON object (null for the defaults).
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; `out` must be writable.
 */
enum LtStatus lt_dataset_generate(const char *config_json, struct LtDataset **out);

/**
 * Generates `num_samples` held-out samples for the same configuration.
 *
 * # Safety
 * As [`lt_dataset_generate`].
 */
enum LtStatus lt_dataset_generate_eval(const char *config_json,
                                       size_t num_samples,
                                       struct LtDataset **out);

/**
 * Loads a dataset snapshot from a JSON file.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum LtStatus lt_dataset_load(const char *path, struct LtDataset **out);

/**
 * Writes a dataset snapshot, replacing an existing file.
 *
 * # Safety
 * `dataset` must be a live handle; `path` must be NUL-terminated.
 */
enum LtStatus lt_dataset_save(const struct LtDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void lt_dataset_free(struct LtDataset *dataset);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t lt_dataset_num_samples(const struct LtDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t lt_dataset_num_classes(const struct LtDataset *dataset);

/**
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t lt_dataset_dim(const struct LtDataset *dataset);

/**
 * Copies the per-class positive counts into `out[0..len]`; `len` must be
 * at least the number of classes.
 *
 * # Safety
 * `dataset` must be a live handle and `out` valid for `len` writes.
 */
enum LtStatus lt_dataset_class_counts(const struct LtDataset *dataset, size_t *out, size_t len);

/**
 * Ranking average precision of `scores` against binary `labels`.
 *
 * # Safety
 * `scores` and `labels` must be valid for `len` reads; `out` writable.
 */
enum LtStatus lt_average_precision(const double *scores,
                                   const uint8_t *labels,
                                   size_t len,
                                   double *out);

/**
 * Trains on `train` and evaluates on `eval` with a run configuration
 * given as JSON (null for the defaults). A run that stops on a numerical
 * failure still yields a handle; see [`lt_run_failed`].
 *
 * # Safety
 * Dataset pointers must be live handles; `config_json` null or
 * NUL-terminated; `out` writable.
 */
enum LtStatus lt_train(const struct LtDataset *train_set,
                       const struct LtDataset *eval_set,
                       const char *config_json,
                       struct LtRun **out);

/**
 * # Safety
 * `run` must be null or a handle not yet freed.
 */
void lt_run_free(struct LtRun *run);

/**
 * Whether the run stopped early on a numerical failure.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
bool lt_run_failed(const struct LtRun *run);

/**
 * Number of completed epochs.
 *
 * # Safety
 * `run` must be null or a live handle.
 */
size_t lt_run_num_epochs(const struct LtRun *run);

/**
 * Final mAP for a class group, in [0, 1]. [`LtStatus::Undefined`] when
 * the group has no classes or no evaluation was recorded.
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum LtStatus lt_run_final_map(const struct LtRun *run, enum LtGroup group, double *out);

/**
 * Mean positive-pair caption distance of the training split after
 * `epoch` (0 is before training).
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum LtStatus lt_run_mean_positive_delta(const struct LtRun *run, size_t epoch, double *out);

/**
 * Writes the run directory (`config.json`, `metrics.csv`, checkpoint,
 * `run.json`). A non-empty directory is refused unless `force`.
 *
 * # Safety
 * `run` must be a live handle; `dir` NUL-terminated.
 */
enum LtStatus lt_run_write(const struct LtRun *run, const char *dir, bool force);

/**
 * The run record as JSON; release with [`lt_string_free`].
 *
 * # Safety
 * `run` must be a live handle and `out` writable.
 */
enum LtStatus lt_run_record_json(const struct LtRun *run, char **out);

/**
 * Gradient-checks `count` seeded random loss configurations. Writes the
 * worst relative error and the number of failing trials.
 *
 * # Safety
 * `max_rel_error` and `num_failed` must be writable.
 */
enum LtStatus lt_gradcheck_trials(uint64_t seed,
                                  size_t count,
                                  double *max_rel_error,
                                  size_t *num_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LTPROMPT_H */

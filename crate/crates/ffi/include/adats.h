/* Generated by cbindgen from crates/ffi. Do not edit. */

#ifndef ADATS_H
#define ADATS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum AdatsStatus {
  ADATS_STATUS_OK = 0,
  ADATS_STATUS_NULL_POINTER = 1,
  ADATS_STATUS_INVALID_ARGUMENT = 2,
  ADATS_STATUS_IO = 3,
  ADATS_STATUS_FORMAT = 4,
  ADATS_STATUS_NUMERICAL = 5,
  ADATS_STATUS_PANIC = 6,
} AdatsStatus;

typedef enum AdatsObjective {
  ADATS_OBJECTIVE_ECE = 0,
  ADATS_OBJECTIVE_NLL = 1,
} AdatsObjective;

// Opaque calibration dataset.
typedef struct AdatsDataset AdatsDataset;

// Opaque sample-adaptive temperature model.
typedef struct AdatsModel AdatsModel;

// Opaque single-temperature scaler.
typedef struct AdatsVanilla AdatsVanilla;

// Calibration metrics of one temperature assignment.
typedef struct AdatsMetrics {
  double accuracy;
  double ece;
  double ada_ece;
  double nll;
  double brier;
  double aurra_confidence;
  double aurra_entropy;
  double aurra_ds;
  double mean_temperature;
} AdatsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *adats_last_error(void);

// Reads a CALD file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AdatsStatus adats_dataset_read(const char *path, struct AdatsDataset **out);

// Builds a dataset from row-major arrays: `features` is `n × d`, `logits`
// is `n × k`, `labels` has `n` entries. Arrays that fail validation give
// `InvalidArgument`.
//
// # Safety
// The arrays must hold the stated number of elements.
enum AdatsStatus adats_dataset_from_arrays(size_t n,
                                           size_t d,
                                           size_t k,
                                           const float *features,
                                           const float *logits,
                                           const uint32_t *labels,
                                           struct AdatsDataset **out);

// Writes the dataset as a CALD file.
//
// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum AdatsStatus adats_dataset_write(const struct AdatsDataset *ds, const char *path);

// # Safety
// `ds` must be a live handle; any of the outputs may be null.
enum AdatsStatus adats_dataset_dims(const struct AdatsDataset *ds, size_t *n, size_t *d, size_t *k);

// # Safety
// `ds` must be null or a handle from this library, freed at most once.
void adats_dataset_free(struct AdatsDataset *ds);

// Metrics with per-sample `temperatures` (length `n`), or with the single
// `temperature` when `temperatures` is null.
//
// # Safety
// `ds` must be a live handle, `temperatures` null or `n` long, `out` valid.
enum AdatsStatus adats_evaluate(const struct AdatsDataset *ds,
                                const double *temperatures,
                                double temperature,
                                size_t bins,
                                struct AdatsMetrics *out);

// `softmax(logits / t)` into `out` (length `k`).
//
// # Safety
// `logits` and `out` must hold `k` elements.
enum AdatsStatus adats_softmax_with_temperature(const double *logits,
                                                size_t k,
                                                double t,
                                                double *out);

// Grid-search fit of a single temperature over `grid_lo:grid_hi:grid_step`.
//
// # Safety
// `ds` must be a live handle and `out` a valid pointer.
enum AdatsStatus adats_vanilla_fit(const struct AdatsDataset *ds,
                                   enum AdatsObjective objective,
                                   double grid_lo,
                                   double grid_hi,
                                   double grid_step,
                                   size_t bins,
                                   struct AdatsVanilla **out);

// Loads a vanilla scaler from its JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AdatsStatus adats_vanilla_load(const char *path, struct AdatsVanilla **out);

// # Safety
// `v` must be a live handle and `out` a valid pointer.
enum AdatsStatus adats_vanilla_temperature(const struct AdatsVanilla *v, double *out);

// # Safety
// `v` must be null or a handle from this library, freed at most once.
void adats_vanilla_free(struct AdatsVanilla *v);

// Loads an adaptive model from its JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AdatsStatus adats_model_load(const char *path, struct AdatsModel **out);

// # Safety
// `m` must be a live handle; any of the outputs may be null.
enum AdatsStatus adats_model_dims(const struct AdatsModel *m,
                                  size_t *d,
                                  size_t *k,
                                  size_t *latent_dim);

// Inference-time temperature of one feature vector of length `d`.
//
// # Safety
// `m` must be a live handle, `features` hold `d` elements, `out` valid.
enum AdatsStatus adats_model_predict_temperature(const struct AdatsModel *m,
                                                 const double *features,
                                                 size_t d,
                                                 double *out);

// Per-sample temperatures (`n`) and calibrated probabilities (`n × k`,
// row-major). Either output may be null.
//
// # Safety
// Handles must be live and non-null outputs sized as stated.
enum AdatsStatus adats_model_calibrate(const struct AdatsModel *m,
                                       const struct AdatsDataset *ds,
                                       double *temperatures,
                                       double *probabilities);

// # Safety
// `m` must be null or a handle from this library, freed at most once.
void adats_model_free(struct AdatsModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADATS_H */

#ifndef RKHS_CHEST_H
#define RKHS_CHEST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RkhsStatus {
  RKHS_STATUS_OK = 0,
  RKHS_STATUS_INVALID_ARGUMENT = 1,
  RKHS_STATUS_SHAPE_MISMATCH = 2,
  RKHS_STATUS_DIVERGED = 3,
  RKHS_STATUS_SIZE_GUARD = 4,
  RKHS_STATUS_PARSE = 5,
  RKHS_STATUS_IO = 6,
  RKHS_STATUS_ZERO_TRUTH = 7,
  RKHS_STATUS_EMPTY_DATASET = 8,
  RKHS_STATUS_UNKNOWN_ESTIMATOR = 9,
  RKHS_STATUS_NULL_POINTER = 10,
  RKHS_STATUS_PANIC = 11,
} RkhsStatus;

/**
 * Precomputed kernel factors and FFT plans for one system.
 */
typedef struct RkhsOperator RkhsOperator;

/**
 * Unfolded-estimator parameter schedule bound to an operator's box grid.
 */
typedef struct RkhsSchedule RkhsSchedule;

/**
 * System description for [`rkhs_operator_new`]. Element spacings are in wavelengths.
 */
typedef struct RkhsSystem {
  size_t n_subcarriers;
  double subcarrier_spacing_hz;
  double carrier_frequency_hz;
  size_t pilot_stride;
  size_t n_rows;
  size_t n_cols;
  double row_spacing_wavelengths;
  double col_spacing_wavelengths;
  size_t rank;
  size_t oversampling;
} RkhsSystem;

typedef struct RkhsDims {
  /**
   * Complex entries of a pilot measurement vector.
   */
  size_t measurement_len;
  /**
   * Complex entries of a full-band channel estimate.
   */
  size_t channel_len;
  size_t n_boxes;
} RkhsDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; valid until the next call.
 */
const char *rkhs_last_error(void);

/**
 * Builds an operator with default estimator settings.
 *
 * # Safety
 * `system` must point to a valid [`RkhsSystem`] and `out` to writable storage.
 */
enum RkhsStatus rkhs_operator_new(const struct RkhsSystem *system, struct RkhsOperator **out);

/**
 * # Safety
 * `op` must come from [`rkhs_operator_new`] and not be used afterwards. Null is a no-op.
 */
void rkhs_operator_free(struct RkhsOperator *op);

/**
 * # Safety
 * `op` must be a live handle and `out` writable.
 */
enum RkhsStatus rkhs_operator_dims(const struct RkhsOperator *op, struct RkhsDims *out);

/**
 * Replaces the estimator settings from a JSON object; absent fields take defaults.
 * The `rank` and `oversampling` fields must match the operator.
 *
 * # Safety
 * `op` must be a live handle and `json` a NUL-terminated string.
 */
enum RkhsStatus rkhs_operator_set_settings(struct RkhsOperator *op, const char *json);

/**
 * Estimates the full-band channel from pilot measurements.
 *
 * # Safety
 * `y` must hold `2·y_len` doubles and `out` `2·out_len` doubles.
 */
enum RkhsStatus rkhs_estimate(const struct RkhsOperator *op,
                              const double *y,
                              size_t y_len,
                              double noise_variance,
                              double *out,
                              size_t out_len);

/**
 * Loads a parameter schedule and checks it against the operator's box grid.
 *
 * # Safety
 * `op` must be a live handle, `path` NUL-terminated, `out` writable.
 */
enum RkhsStatus rkhs_schedule_load(const struct RkhsOperator *op,
                                   const char *path,
                                   struct RkhsSchedule **out);

/**
 * # Safety
 * `schedule` must come from [`rkhs_schedule_load`] and not be used afterwards. Null is a no-op.
 */
void rkhs_schedule_free(struct RkhsSchedule *schedule);

/**
 * Runs the unfolded estimator with a loaded schedule.
 *
 * # Safety
 * Same buffer rules as [`rkhs_estimate`].
 */
enum RkhsStatus rkhs_dd_estimate(const struct RkhsOperator *op,
                                 const struct RkhsSchedule *schedule,
                                 const double *y,
                                 size_t y_len,
                                 double *out,
                                 size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RKHS_CHEST_H */

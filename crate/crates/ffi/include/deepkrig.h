#ifndef DEEPKRIG_H
#define DEEPKRIG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  DK_STATUS_OK = 0,
  DK_STATUS_NULL_POINTER = 1,
  DK_STATUS_INVALID_ARGUMENT = 2,
  DK_STATUS_CONFIG = 3,
  DK_STATUS_NUMERIC = 4,
  DK_STATUS_IO = 5,
  DK_STATUS_FORMAT = 6,
  DK_STATUS_PANIC = 7,
} DkStatus;

/**
 * A cokriging predictor conditioned on training data.
 */
typedef struct DkCokriging DkCokriging;

/**
 * A trained network model.
 */
typedef struct DkModel DkModel;

/**
 * Bivariate observations at `n` sites.
 */
typedef struct DkObservations DkObservations;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dk_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dk_version(void);

/**
 * Wendland taper at scaled distance `d`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
DkStatus dk_wendland(double d, double *out);

/**
 * Matérn correlation at lag `h` with smoothness `nu` and range `alpha`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
DkStatus dk_matern_corr(double h, double nu, double alpha, double *out);

/**
 * Tukey g-and-h transform of `z`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
DkStatus dk_tukey_gh(double z, double g, double h, double *out);

/**
 * Copies `n` rows of coordinates and values.
 *
 * # Safety
 * Each array must hold `n` doubles; `out` must be writable.
 */
DkStatus dk_observations_new(const double *x,
                             const double *y,
                             const double *z1,
                             const double *z2,
                             size_t n,
                             DkObservations **out);

/**
 * Reads an `x,y,z1,z2` CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
DkStatus dk_observations_read(const char *path, DkObservations **out);

/**
 * Number of sites, or 0 for a null handle.
 *
 * # Safety
 * `obs` must be null or a live handle.
 */
size_t dk_observations_len(const DkObservations *obs);

/**
 * # Safety
 * `obs` must be null or a handle not yet freed.
 */
void dk_observations_free(DkObservations *obs);

/**
 * Trains on `obs` with a TOML run configuration (the `[basis]` and
 * `[deepkriging]` sections and `seed` are used). Null selects defaults.
 *
 * # Safety
 * `obs` must be a live handle, `config_toml` null or NUL-terminated, and
 * `out` writable.
 */
DkStatus dk_model_fit(const DkObservations *obs, const char *config_toml, DkModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
DkStatus dk_model_load(const char *path, DkModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
DkStatus dk_model_save(const DkModel *model, const char *path);

/**
 * Predicts both variables at `n` sites into `z1_out` and `z2_out`.
 *
 * # Safety
 * Input arrays hold `n` doubles; output arrays have room for `n`.
 */
DkStatus dk_model_predict(const DkModel *model,
                          const double *x,
                          const double *y,
                          size_t n,
                          double *z1_out,
                          double *z2_out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dk_model_free(DkModel *model);

/**
 * Conditions on `obs` under a covariance model given as JSON, e.g.
 * `{"family":"matern","sigma2_1":1,...,"nugget":[0,0]}`.
 *
 * # Safety
 * `obs` must be a live handle, `covariance_json` NUL-terminated, `out`
 * writable.
 */
DkStatus dk_cokriging_fit(const DkObservations *obs,
                          const char *covariance_json,
                          DkCokriging **out);

/**
 * Predictive means and variances of both variables at `n` sites. The
 * variance pointers may be null.
 *
 * # Safety
 * Input arrays hold `n` doubles; non-null outputs have room for `n`.
 */
DkStatus dk_cokriging_predict(const DkCokriging *model,
                              const double *x,
                              const double *y,
                              size_t n,
                              double *mean1,
                              double *mean2,
                              double *var1,
                              double *var2);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dk_cokriging_free(DkCokriging *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPKRIG_H */

/* C interface to the ctista library. Complex arrays are interleaved (re, im) doubles. */

#ifndef CTISTA_H
#define CTISTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CtistaStatus {
  CTISTA_STATUS_OK = 0,
  CTISTA_STATUS_NULL_POINTER = 1,
  CTISTA_STATUS_DIMENSION = 2,
  CTISTA_STATUS_INVALID_ARGUMENT = 3,
  CTISTA_STATUS_RANK_DEFICIENT = 4,
  CTISTA_STATUS_DIVERGENCE = 5,
  CTISTA_STATUS_CONFIG = 6,
  CTISTA_STATUS_PARAM_FILE = 7,
  CTISTA_STATUS_IO = 8,
  CTISTA_STATUS_INTERNAL = 9,
} CtistaStatus;

/**
 * The frozen problem context of the unrolled recursion.
 */
typedef struct CtistaModel CtistaModel;

/**
 * The `3T` trainable scalars.
 */
typedef struct CtistaParams CtistaParams;

/**
 * A scenario with its sensing matrix drawn and noise calibrated.
 */
typedef struct CtistaScenario CtistaScenario;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after success).
 * The pointer stays valid until the next call on the same thread.
 */
const char *ctista_last_error(void);

/**
 * Builds a scenario from TOML text.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum CtistaStatus ctista_scenario_from_toml(const char *toml, struct CtistaScenario **out);

/**
 * Builds a scenario from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum CtistaStatus ctista_scenario_load(const char *path, struct CtistaScenario **out);

/**
 * Releases a scenario; null is ignored.
 *
 * # Safety
 * `scenario` must be null or a handle not yet freed.
 */
void ctista_scenario_free(struct CtistaScenario *scenario);

/**
 * Writes `n`, `m`, the layer count `T` and the noise variance.
 *
 * # Safety
 * `scenario` must be a live handle; each output pointer must be writable.
 */
enum CtistaStatus ctista_scenario_dims(const struct CtistaScenario *scenario,
                                       size_t *n,
                                       size_t *m,
                                       size_t *layers,
                                       double *sigma2);

/**
 * Draws evaluation instance `trial`: writes `x` (`2n` doubles) and
 * `y` (`2m` doubles).
 *
 * # Safety
 * `scenario` must be a live handle; `x` and `y` must hold `2n` and `2m`
 * writable doubles.
 */
enum CtistaStatus ctista_scenario_generate(const struct CtistaScenario *scenario,
                                           uint64_t trial,
                                           double *x,
                                           double *y);

/**
 * Prepares the recursion (pseudo-inverse, trace) for a scenario.
 *
 * # Safety
 * `scenario` must be a live handle and `out` a writable pointer slot.
 */
enum CtistaStatus ctista_model_new(const struct CtistaScenario *scenario, struct CtistaModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ctista_model_free(struct CtistaModel *model);

/**
 * Initial parameters `β = 1`, `a = sigma2`, `b = 1` for `layers` layers.
 *
 * # Safety
 * `out` must be a writable pointer slot.
 */
enum CtistaStatus ctista_params_init(size_t layers, double sigma2, struct CtistaParams **out);

/**
 * Initial parameters for `model`: `β = 1`, `b = 1` and `a` equal to
 * `sigma2` carried through the zero-forcing map (`sigma2·‖W‖²_F/n`), the
 * starting point used by training.
 *
 * # Safety
 * `model` must come from [`ctista_model_new`]; `out` must be a writable
 * pointer slot.
 */
enum CtistaStatus ctista_model_init_params(const struct CtistaModel *model,
                                           double sigma2,
                                           struct CtistaParams **out);

/**
 * Parameters from explicit arrays of length `layers`.
 *
 * # Safety
 * `beta`, `a` and `b` must each hold `layers` readable doubles; `out` must
 * be a writable pointer slot.
 */
enum CtistaStatus ctista_params_new(size_t layers,
                                    const double *beta,
                                    const double *a,
                                    const double *b,
                                    struct CtistaParams **out);

/**
 * Releases parameters; null is ignored.
 *
 * # Safety
 * `params` must be null or a handle not yet freed.
 */
void ctista_params_free(struct CtistaParams *params);

/**
 * Number of layers `T` of a parameter set (0 for null).
 *
 * # Safety
 * `params` must be null or a live handle.
 */
size_t ctista_params_layers(const struct CtistaParams *params);

/**
 * Copies the parameters into arrays of length `layers`, which must equal
 * the parameter count.
 *
 * # Safety
 * `params` must be a live handle; `beta`, `a`, `b` must each hold `layers`
 * writable doubles.
 */
enum CtistaStatus ctista_params_get(const struct CtistaParams *params,
                                    size_t layers,
                                    double *beta,
                                    double *a,
                                    double *b);

/**
 * Reads a trained-parameter JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer slot.
 */
enum CtistaStatus ctista_params_load(const char *path, struct CtistaParams **out);

/**
 * Writes parameters as JSON, tagged with the scenario's digest and seed.
 *
 * # Safety
 * `params` and `scenario` must be live handles and `path` a NUL-terminated
 * string.
 */
enum CtistaStatus ctista_params_save(const struct CtistaParams *params,
                                     const struct CtistaScenario *scenario,
                                     const char *path);

/**
 * Runs the configured incremental training and returns the parameters.
 *
 * # Safety
 * `scenario` and `model` must be live handles built from the same
 * scenario; `out` must be a writable pointer slot.
 */
enum CtistaStatus ctista_train(const struct CtistaScenario *scenario,
                               const struct CtistaModel *model,
                               struct CtistaParams **out);

/**
 * C-TISTA estimate `x` (`2n` doubles) from `y` (`2m` doubles).
 *
 * # Safety
 * `model` and `params` must be live handles; `y` must hold `2m` readable
 * doubles and `x` `2n` writable doubles.
 */
enum CtistaStatus ctista_forward(const struct CtistaModel *model,
                                 const struct CtistaParams *params,
                                 const double *y,
                                 double *x);

/**
 * Zero-forcing estimate `x = W y`.
 *
 * # Safety
 * As for [`ctista_forward`].
 */
enum CtistaStatus ctista_zero_forcing(const struct CtistaModel *model, const double *y, double *x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTISTA_H */

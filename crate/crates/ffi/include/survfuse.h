#ifndef SURVFUSE_H
#define SURVFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_SHAPE = 3,
  SF_STATUS_NON_FINITE = 4,
  SF_STATUS_UNDEFINED = 5,
  SF_STATUS_IO = 6,
  SF_STATUS_FORMAT = 7,
  SF_STATUS_CONFIG = 8,
  SF_STATUS_STATE = 9,
  SF_STATUS_PANIC = 10,
} SfStatus;

/**
 * A loaded cohort CSV.
 */
typedef struct SfCohort SfCohort;

/**
 * A trained fusion model loaded from a checkpoint.
 */
typedef struct SfModel SfModel;

typedef struct SfModulationOptions {
  double rho_min;
  double rho_max;
  double epsilon;
  /**
   * Nonzero: median of the per-sample ratios instead of the mean.
   */
  uint8_t median;
  /**
   * Nonzero: exponentiate the score in the numerator too.
   */
  uint8_t exp_numerator;
} SfModulationOptions;

typedef struct SfContribution {
  double rho_g_raw;
  double rho_p_raw;
  double rho_g;
  double rho_p;
  double factor_g;
  double factor_p;
  /**
   * 1 when the batch had no events (all fields neutral).
   */
  uint8_t degenerate;
} SfContribution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t sf_last_error(char *buf, uintptr_t len);

/**
 * Static version string, e.g. `"0.1.0"`.
 */
const char *sf_version(void);

/**
 * Negative Cox partial log-likelihood (Breslow ties) of `theta`.
 *
 * # Safety
 * `theta`, `times` and `events` must each hold `n` values; `loss` must be writable.
 */
enum SfStatus sf_cox_loss(const double *theta,
                          const double *times,
                          const uint8_t *events,
                          uintptr_t n,
                          double *loss);

/**
 * Gradient of [`sf_cox_loss`] with respect to `theta`, written to `grad[0..n]`.
 *
 * # Safety
 * As [`sf_cox_loss`]; `grad` must hold `n` writable values.
 */
enum SfStatus sf_cox_gradient(const double *theta,
                              const double *times,
                              const uint8_t *events,
                              uintptr_t n,
                              double *grad);

/**
 * Harrell's C of risk scores `theta`. `SfStatus::Undefined` when no pair is comparable.
 *
 * # Safety
 * `theta`, `times` and `events` must each hold `n` values; `c_index` must be writable.
 */
enum SfStatus sf_concordance_index(const double *theta,
                                   const double *times,
                                   const uint8_t *events,
                                   uintptr_t n,
                                   double *c_index);

/**
 * `min(1 − tanh(rho − 1), 1)`.
 */
double sf_modulation_factor(double rho);

struct SfModulationOptions sf_modulation_options_default(void);

/**
 * Contribution ratios and step-size factors for branch scores `s_g`, `s_p`.
 * `options` may be null for the defaults.
 *
 * # Safety
 * `s_g`, `s_p`, `times` and `events` must each hold `n` values; `options`
 * must be null or valid; `result` must be writable.
 */
enum SfStatus sf_contribution_ratio(const double *s_g,
                                    const double *s_p,
                                    const double *times,
                                    const uint8_t *events,
                                    uintptr_t n,
                                    const struct SfModulationOptions *options,
                                    struct SfContribution *result);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `cohort` must be writable.
 */
enum SfStatus sf_cohort_load(const char *path, struct SfCohort **cohort);

/**
 * Number of patients; 0 for a null handle.
 *
 * # Safety
 * `cohort` must be null or a live handle.
 */
uintptr_t sf_cohort_len(const struct SfCohort *cohort);

/**
 * # Safety
 * `cohort` must be null or a handle from [`sf_cohort_load`] not yet freed.
 */
void sf_cohort_free(struct SfCohort *cohort);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `model` must be writable.
 */
enum SfStatus sf_model_load(const char *path, struct SfModel **model);

/**
 * # Safety
 * `model` must be null or a handle from [`sf_model_load`] not yet freed.
 */
void sf_model_free(struct SfModel *model);

/**
 * Log-hazard scores for every patient, written to `theta[0..len]`; `len`
 * must equal the cohort size.
 *
 * # Safety
 * `model` and `cohort` must be live handles; `theta` must hold `len` writable values.
 */
enum SfStatus sf_model_predict(const struct SfModel *model,
                               const struct SfCohort *cohort,
                               double *theta,
                               uintptr_t len);

/**
 * C-index and per-event Cox loss of `model` on `cohort`.
 *
 * # Safety
 * `model` and `cohort` must be live handles; both outputs must be writable.
 */
enum SfStatus sf_model_evaluate(const struct SfModel *model,
                                const struct SfCohort *cohort,
                                double *c_index,
                                double *mean_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SURVFUSE_H */

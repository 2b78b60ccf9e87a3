#ifndef GRAD_H
#define GRAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Width of one state vector.
 */
#define GRAD_STATE_DIM 16

typedef enum GradStatus {
  GRAD_STATUS_OK = 0,
  GRAD_STATUS_NULL_POINTER = 1,
  GRAD_STATUS_INVALID_ARGUMENT = 2,
  GRAD_STATUS_IO = 3,
  GRAD_STATUS_CHECKPOINT = 4,
  GRAD_STATUS_PANIC = 5,
} GradStatus;

/**
 * A loaded checkpoint. Opaque to C.
 */
typedef struct GradModel GradModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *grad_last_error(void);

/**
 * Loads the checkpoint directory `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GradStatus grad_model_load(const char *path, struct GradModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from `grad_model_load` and not be freed twice.
 */
void grad_model_free(struct GradModel *model);

/**
 * Context window of the model in steps.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t grad_model_seq_len(const struct GradModel *model);

/**
 * Return-to-go a rollout should start from.
 *
 * # Safety
 * `model` must be a live handle.
 */
double grad_model_target_return(const struct GradModel *model);

/**
 * Action for the most recent of `len` steps, oldest first. `rtg` and
 * `prev_actions` hold `len` values and `states` holds `len * GRAD_STATE_DIM`,
 * all in raw units.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `out` must be valid.
 */
enum GradStatus grad_model_predict(const struct GradModel *model,
                                   const double *rtg,
                                   const double *states,
                                   const double *prev_actions,
                                   size_t len,
                                   double *out);

/**
 * Undiscounted suffix sums of `rewards` into `out` (both of length `len`).
 *
 * # Safety
 * Both pointers must reference `len` values.
 */
enum GradStatus grad_compute_rtg(const double *rewards, size_t len, double *out);

/**
 * Constraint penalty `min((limit / (cost / max(count, 1)))^beta, 1)`, 1
 * without cost.
 */
double grad_penalty(double cost, double count, double limit, double beta);

/**
 * Percentage of periods with CPC at most `gamma_tol * target`.
 *
 * # Safety
 * `cpcs` must reference `len` values and `out` must be valid.
 */
enum GradStatus grad_cpc_cr(const double *cpcs,
                            size_t len,
                            double target,
                            double gamma_tol,
                            double *out);

double grad_online_reward(double ctr, double cpc, double theta, double p_max, bool active);

/**
 * Solves a JSON instance (brute force up to the size limit, greedy beyond)
 * and writes the JSON solution to `*out`, to be released with
 * `grad_string_free`.
 *
 * # Safety
 * `instance_json` must be a NUL-terminated string and `out` valid.
 */
enum GradStatus grad_oracle_solve_json(const char *instance_json, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void grad_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAD_H */

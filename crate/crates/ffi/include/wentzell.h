#ifndef WENTZELL_H
#define WENTZELL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes. Values 1 to 3 match the command-line exit codes.
 */
typedef enum WwStatus {
  WW_STATUS_OK = 0,
  WW_STATUS_CONFIG_ERROR = 1,
  WW_STATUS_HYPOTHESIS_VIOLATION = 2,
  WW_STATUS_NUMERICAL_FAILURE = 3,
  WW_STATUS_NULL_POINTER = 10,
  WW_STATUS_INVALID_ARGUMENT = 11,
  WW_STATUS_PANIC = 12,
} WwStatus;

/**
 * Opaque solver: a linear system, its source and the current state.
 */
typedef struct WwSolver WwSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ww_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next call on this thread.
 */
const char *ww_last_error_message(void);

/**
 * Builds a solver from TOML configuration text. The nonlinearity block is
 * ignored: the handle steps the linear problem with its source.
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WwStatus ww_solver_new(const char *config_toml, bool allow_unchecked, struct WwSolver **out);

/**
 * Releases a solver. Null is accepted and ignored.
 *
 * # Safety
 * `solver` must be null or a handle from [`ww_solver_new`] not yet freed.
 */
void ww_solver_free(struct WwSolver *solver);

/**
 * Number of nodal degrees of freedom (length of each of `u` and `w`).
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum WwStatus ww_solver_dofs(const struct WwSolver *solver, size_t *out);

/**
 * Current time of the solver.
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum WwStatus ww_solver_time(const struct WwSolver *solver, double *out);

/**
 * Advances `n_steps` implicit midpoint steps of the configured size. Fails
 * without changing the state if the steps would pass the horizon.
 *
 * # Safety
 * `solver` must be a live handle.
 */
enum WwStatus ww_solver_step(struct WwSolver *solver, size_t n_steps);

/**
 * Copies the state into caller buffers of length `len` (the dof count).
 *
 * # Safety
 * `u` and `w` must each be valid for `len` writes.
 */
enum WwStatus ww_solver_get_state(const struct WwSolver *solver, double *u, double *w, size_t len);

/**
 * Replaces the state at the current time.
 *
 * # Safety
 * `u` and `w` must each be valid for `len` reads.
 */
enum WwStatus ww_solver_set_state(struct WwSolver *solver,
                                  const double *u,
                                  const double *w,
                                  size_t len);

/**
 * Energy of the current state under the operator at the current time.
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum WwStatus ww_solver_energy(const struct WwSolver *solver, double *out);

/**
 * Control norm of the current state at the current time.
 *
 * # Safety
 * `solver` must be a live handle and `out` a valid pointer.
 */
enum WwStatus ww_solver_control_norm(const struct WwSolver *solver, double *out);

/**
 * Runs a command-line mode. `out_dir` may be null for the default
 * directory and `seed < 0` keeps the configured seed. On success
 * `exit_code` receives the process exit code the command line would return
 * (0 to 4).
 *
 * # Safety
 * String arguments must be NUL-terminated; `exit_code` must be valid.
 */
enum WwStatus ww_run(const char *mode,
                     const char *config_path,
                     const char *out_dir,
                     int64_t seed,
                     bool allow_unchecked,
                     int *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WENTZELL_H */

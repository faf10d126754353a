#ifndef TEAMS_H
#define TEAMS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TeamsStatus {
  TeamsStatus_Ok = 0,
  TeamsStatus_NullPointer = 1,
  TeamsStatus_InvalidUtf8 = 2,
  /**
   * Malformed JSON, unknown names, inconsistent shapes.
   */
  TeamsStatus_Config = 3,
  /**
   * A solver or simulation failed.
   */
  TeamsStatus_Solver = 4,
  TeamsStatus_Io = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  TeamsStatus_Panic = 6,
} TeamsStatus;

/**
 * A problem together with its default policy profile.
 */
typedef struct TeamsProblem TeamsProblem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread as a new string, or null if
 * the last call succeeded. Free with [`teams_string_free`].
 */
char *teams_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library that was not freed yet.
 */
void teams_string_free(char *s);

/**
 * Library version as a static string; do not free.
 */
const char *teams_version(void);

/**
 * Looks up a built-in problem by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TeamsStatus teams_problem_builtin(const char *name, struct TeamsProblem **out);

/**
 * Parses a problem from JSON; its default profile is zero affine policies.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TeamsStatus teams_problem_from_json(const char *json, struct TeamsProblem **out);

/**
 * # Safety
 * `problem` must be null or a handle from this library that was not freed yet.
 */
void teams_problem_free(struct TeamsProblem *problem);

/**
 * Number of decision makers, or 0 for a null handle.
 *
 * # Safety
 * `problem` must be null or a live handle.
 */
uintptr_t teams_problem_dm_count(const struct TeamsProblem *problem);

/**
 * The problem's default profile as JSON. Free with [`teams_string_free`].
 *
 * # Safety
 * `problem` must be a live handle and `out` a valid pointer.
 */
enum TeamsStatus teams_problem_default_policy(const struct TeamsProblem *problem, char **out);

/**
 * Monte Carlo payoff of a profile under the original measure.
 *
 * `policy_json` may be null to use the problem's default profile; `dt` is the
 * continuous-time step and is ignored for discrete-time problems.
 *
 * # Safety
 * `problem` must be a live handle, `policy_json` null or a NUL-terminated
 * string, `out_value` and `out_stderr` valid pointers.
 */
enum TeamsStatus teams_evaluate(const struct TeamsProblem *problem,
                                const char *policy_json,
                                uintptr_t n_paths,
                                uint64_t seed,
                                double dt,
                                double *out_value,
                                double *out_stderr);

/**
 * Runs a JSON run config, writing its artifacts, and returns the report as
 * JSON. Relative paths in the config are resolved against `base_dir`, or the
 * current directory when it is null. Free the report with [`teams_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `base_dir` null or a
 * NUL-terminated string, and `report_json` a valid pointer.
 */
enum TeamsStatus teams_run(const char *config_json, const char *base_dir, char **report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TEAMS_H */

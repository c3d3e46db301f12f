#ifndef STABKIT_H
#define STABKIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define STABKIT_VARIANT_NOMINAL 0

#define STABKIT_VARIANT_PERTURBED 1

#define STABKIT_VARIANT_CONTROLLED 2

#define STABKIT_VARIANT_CONTROLLED_PERTURBED 3

#define STABKIT_ROLE_F 0

#define STABKIT_ROLE_F_TILDE 1

#define STABKIT_ROLE_G 2

#define STABKIT_ROLE_G_TILDE 3

typedef enum StabkitStatus {
  STABKIT_STATUS_OK = 0,
  STABKIT_STATUS_NULL_POINTER = 1,
  STABKIT_STATUS_INVALID_UTF8 = 2,
  STABKIT_STATUS_PARSE_ERROR = 3,
  STABKIT_STATUS_INVALID_ARGUMENT = 4,
  STABKIT_STATUS_EVAL_ERROR = 5,
  STABKIT_STATUS_BUFFER_TOO_SMALL = 6,
  STABKIT_STATUS_CONFIG_ERROR = 7,
  STABKIT_STATUS_NUMERIC_ERROR = 8,
  STABKIT_STATUS_PANIC = 9,
} StabkitStatus;

/**
 * Opaque system handle.
 */
typedef struct StabkitSystem StabkitSystem;

typedef struct StabkitCertificate {
  double alpha;
  double beta;
  uintptr_t sample_count;
  uintptr_t skipped;
} StabkitCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a system with nominal part `f` of the given order.
 *
 * # Safety
 * `f` must be a NUL-terminated string and `out` a valid pointer.
 */
enum StabkitStatus stabkit_system_new(const char *f, uintptr_t order, struct StabkitSystem **out);

/**
 * Sets or replaces one component. A null `expr` removes it (except `f`).
 *
 * # Safety
 * `system` must come from `stabkit_system_new`; `expr` is null or NUL-terminated.
 */
enum StabkitStatus stabkit_system_set_component(struct StabkitSystem *system,
                                                uint32_t role_id,
                                                const char *expr,
                                                uintptr_t order);

/**
 * Releases a system. Null is ignored.
 *
 * # Safety
 * `system` must come from `stabkit_system_new` and not be used afterwards.
 */
void stabkit_system_free(struct StabkitSystem *system);

/**
 * Order `m` of the system, 0 for a null handle.
 *
 * # Safety
 * `system` must be null or come from `stabkit_system_new`.
 */
uintptr_t stabkit_system_order(const struct StabkitSystem *system);

/**
 * Iterates a variant for `steps` steps from `history` (most recent first,
 * exactly `m` values). Writes `x_1..` into `out` (capacity `steps`) and the
 * number produced into `written`; fewer than `steps` means the run diverged.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum StabkitStatus stabkit_scalar_run(const struct StabkitSystem *system,
                                      uint32_t variant_id,
                                      const double *history,
                                      uintptr_t history_len,
                                      uintptr_t steps,
                                      double *out,
                                      uintptr_t *written);

/**
 * Equilibria of a variant in `[lo, hi]`. `count` receives the number
 * found; `BufferTooSmall` is returned when it exceeds `capacity`, with the
 * first `capacity` values written.
 *
 * # Safety
 * `out` must hold `capacity` doubles; `count` must be valid.
 */
enum StabkitStatus stabkit_find_equilibria(const struct StabkitSystem *system,
                                           uint32_t variant_id,
                                           double lo,
                                           double hi,
                                           uintptr_t grid,
                                           double tol,
                                           double *out,
                                           uintptr_t capacity,
                                           uintptr_t *count);

/**
 * Growth certificate of a variant about the constant state `equilibrium`
 * over the max-norm ball of `radius` around it.
 *
 * # Safety
 * `system` and `out` must be valid.
 */
enum StabkitStatus stabkit_growth_certificate(const struct StabkitSystem *system,
                                              uint32_t variant_id,
                                              double equilibrium,
                                              double radius,
                                              uintptr_t samples,
                                              uint64_t seed,
                                              struct StabkitCertificate *out);

/**
 * Runs a CLI command (`"full"`, `"certify"`, ..) on a TOML configuration
 * and hands back the JSON report. Nothing is written to disk.
 *
 * # Safety
 * String arguments must be NUL-terminated; `report` and `exit_code` valid.
 * The report must be released with `stabkit_string_free`.
 */
enum StabkitStatus stabkit_run_config(const char *config_toml,
                                      const char *command,
                                      char **report,
                                      int32_t *exit_code);

/**
 * Frees a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void stabkit_string_free(char *s);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *stabkit_last_error(void);

/**
 * Library version, a static string.
 */
const char *stabkit_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STABKIT_H */

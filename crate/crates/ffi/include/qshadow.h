#ifndef QSHADOW_H
#define QSHADOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define QS_OK 0

#define QS_ERR_NULL 1

#define QS_ERR_UTF8 2

#define QS_ERR_CONFIG 3

#define QS_ERR_INVALID 4

#define QS_ERR_NUMERIC 5

#define QS_ERR_IO 6

#define QS_ERR_BUFFER 7

#define QS_ERR_PANIC 8

/**
 * A validated experiment configuration.
 */
typedef struct QsConfig QsConfig;

/**
 * A map from the registry.
 */
typedef struct QsSystem QsSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes.
 */
int32_t qs_last_error(char *buf, size_t cap);

/**
 * Creates a registry system. Pass NaN for `alpha_rot` or `nu` to keep the defaults.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
int32_t qs_system_new(const char *name, double alpha_rot, double nu, struct QsSystem **out);

/**
 * # Safety
 * `sys` must come from [`qs_system_new`] and not be used afterwards; null is ignored.
 */
void qs_system_free(struct QsSystem *sys);

/**
 * # Safety
 * `sys` and `out` must be valid.
 */
int32_t qs_system_dimension(const struct QsSystem *sys, size_t *out);

/**
 * Applies `f^n` (negative `n` for the inverse) to `x` in place.
 *
 * # Safety
 * `x` must point to `len` doubles.
 */
int32_t qs_system_iterate(const struct QsSystem *sys, double *x, size_t len, int64_t n);

/**
 * Lyapunov exponents at `x` over `horizon` steps, written in decreasing order to `out`.
 *
 * # Safety
 * `x` and `out` must each point to `len` doubles.
 */
int32_t qs_lyapunov(const struct QsSystem *sys,
                    const double *x,
                    size_t len,
                    size_t horizon,
                    double *out);

/**
 * Smallest block index `k <= k_max` certified at `x` with default rates.
 *
 * # Safety
 * `x` must point to `len` doubles, `kappa` must be valid.
 */
int32_t qs_classify_block(const struct QsSystem *sys,
                          const double *x,
                          size_t len,
                          size_t horizon,
                          uint32_t k_max,
                          uint32_t *kappa);

/**
 * Number of fixed points of the `n`-th iterate of the cat map.
 *
 * # Safety
 * `out` must be valid.
 */
int32_t qs_cat_fixed_count(size_t n, double *out);

/**
 * Parses and validates a TOML configuration.
 *
 * # Safety
 * `toml` must be NUL-terminated and `out` valid.
 */
int32_t qs_config_parse(const char *toml, struct QsConfig **out);

/**
 * Default configuration for a registry system.
 *
 * # Safety
 * `system` must be NUL-terminated and `out` valid.
 */
int32_t qs_config_default(const char *system, struct QsConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards; null is ignored.
 */
void qs_config_free(struct QsConfig *cfg);

/**
 * # Safety
 * `cfg` must be valid.
 */
int32_t qs_config_set_seed(struct QsConfig *cfg, uint64_t seed);

/**
 * SHA-256 hex digest of the canonical configuration (65 bytes with the NUL).
 *
 * # Safety
 * `buf` must point to `cap` writable bytes.
 */
int32_t qs_config_hash(const struct QsConfig *cfg, char *buf, size_t cap);

/**
 * Runs a subcommand and writes its artifacts under `out_dir`; `pass` receives 1 or 0.
 *
 * # Safety
 * Strings must be NUL-terminated and `pass` valid.
 */
int32_t qs_run(const struct QsConfig *cfg,
               const char *subcommand,
               const char *out_dir,
               uint32_t jobs,
               int32_t *pass);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QSHADOW_H */

/* C interface for the cktgen circuit generation library. */

#ifndef CKTGEN_H
#define CKTGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define CKTGEN_OK 0

/**
 * A required pointer argument was null.
 */
#define CKTGEN_ERR_NULL 1

/**
 * A string argument was not valid UTF-8.
 */
#define CKTGEN_ERR_UTF8 2

/**
 * JSON or checkpoint bytes failed to parse.
 */
#define CKTGEN_ERR_PARSE 3

/**
 * Arguments were well-formed but inconsistent with the data or profile.
 */
#define CKTGEN_ERR_DATA 4

/**
 * A numeric failure (non-finite values) occurred.
 */
#define CKTGEN_ERR_NUMERIC 5

/**
 * An internal invariant failed.
 */
#define CKTGEN_ERR_INTERNAL 6

/**
 * Opaque trained-model handle.
 */
typedef struct CktgenModel CktgenModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cktgen_last_error(void);

/**
 * Library version as a static string; do not free.
 */
const char *cktgen_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 */
void cktgen_string_free(char *s);

/**
 * Loads a model checkpoint; returns null on failure (see
 * `cktgen_last_error`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string or null.
 */
struct CktgenModel *cktgen_model_load(const char *path);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer from `cktgen_model_load`, not yet freed.
 */
void cktgen_model_free(struct CktgenModel *model);

/**
 * Writes `{"profile", "latent_dim", "n_max", "gain_categories",
 * "bw_categories", "pm_categories"}` as JSON.
 *
 * # Safety
 * `model` must be a live handle; `out_json` must be writable.
 */
int32_t cktgen_model_info(const struct CktgenModel *model, char **out_json);

/**
 * Decodes one circuit conditioned on binned specification categories.
 * `temperature <= 0` selects greedy decoding. The result JSON is a circuit
 * record: `{"nodes": [...], "edges": [[j, i], ...]}` with 0-based indices.
 *
 * # Safety
 * `model` must be a live handle; `out_json` must be writable.
 */
int32_t cktgen_model_generate(const struct CktgenModel *model,
                              uint16_t gain_cat,
                              uint16_t bw_cat,
                              uint16_t pm_cat,
                              double temperature,
                              uint64_t seed,
                              char **out_json);

/**
 * Decodes one circuit from a standard-normal latent draw.
 *
 * # Safety
 * `model` must be a live handle; `out_json` must be writable.
 */
int32_t cktgen_model_generate_unconditional(const struct CktgenModel *model,
                                            double temperature,
                                            uint64_t seed,
                                            char **out_json);

/**
 * Validates a circuit record against a profile's conventions and writes
 * the per-rule report as JSON.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out_json` must
 * be writable.
 */
int32_t cktgen_circuit_validate(const char *circuit_json, const char *profile, char **out_json);

/**
 * Writes the canonical topology digest of a circuit as a hex string.
 * Circuits that differ only in device parameters share a digest.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out_hex` must be
 * writable.
 */
int32_t cktgen_circuit_hash(const char *circuit_json, const char *profile, char **out_hex);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CKTGEN_H */

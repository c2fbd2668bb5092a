#ifndef COGSYM_H
#define COGSYM_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CogsymStatus {
  COGSYM_STATUS_OK = 0,
  COGSYM_STATUS_NULL_POINTER = 1,
  COGSYM_STATUS_INVALID_ARGUMENT = 2,
  COGSYM_STATUS_CONFIG = 3,
  COGSYM_STATUS_IO = 4,
  COGSYM_STATUS_FORMAT = 5,
  COGSYM_STATUS_PLAN = 6,
  COGSYM_STATUS_NUMERIC = 7,
  COGSYM_STATUS_STATE = 8,
  COGSYM_STATUS_BUFFER_TOO_SMALL = 9,
  COGSYM_STATUS_PANIC = 10,
} CogsymStatus;

/**
 * Opaque model handle.
 */
typedef struct CogsymModel CogsymModel;

/**
 * Opaque language suite handle.
 */
typedef struct CogsymSuite CogsymSuite;

/**
 * Model architecture passed by value.
 */
typedef struct CogsymModelConfig {
  size_t n_layers;
  size_t d_model;
  size_t n_heads;
  size_t d_ffn;
  size_t vocab_size;
  size_t context_len;
  bool tie_embeddings;
} CogsymModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *cogsym_last_error(void);

/**
 * Architecture of the default toy model.
 */
struct CogsymModelConfig cogsym_toy_config(void);

/**
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum CogsymStatus cogsym_model_new(struct CogsymModelConfig config,
                                   uint64_t seed,
                                   struct CogsymModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`cogsym_model_new`].
 */
enum CogsymStatus cogsym_model_load(const char *path, struct CogsymModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum CogsymStatus cogsym_model_save(const struct CogsymModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void cogsym_model_free(struct CogsymModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
enum CogsymStatus cogsym_model_config(const struct CogsymModel *model,
                                      struct CogsymModelConfig *out);

/**
 * Next-token logits after `tokens`, written to `logits` (capacity `cap`,
 * at least the vocabulary size).
 *
 * # Safety
 * `tokens` must point to `n_tokens` ids and `logits` to `cap` floats.
 */
enum CogsymStatus cogsym_model_next_logits(const struct CogsymModel *model,
                                           const uint32_t *tokens,
                                           size_t n_tokens,
                                           float *logits,
                                           size_t cap);

/**
 * Suite of `n_known` known languages `k0..` and `n_unknown` unknown ones `u0..`.
 *
 * # Safety
 * `out` must be writable.
 */
enum CogsymStatus cogsym_suite_new(uint64_t seed,
                                   size_t concept_count,
                                   size_t n_known,
                                   size_t n_unknown,
                                   size_t vocab_size,
                                   struct CogsymSuite **out);

/**
 * # Safety
 * `suite` must be null or a handle not yet freed.
 */
void cogsym_suite_free(struct CogsymSuite *suite);

/**
 * Token of `concept` in language `language`.
 *
 * # Safety
 * `suite` must be a live handle, `language` NUL-terminated, `out` writable.
 */
enum CogsymStatus cogsym_suite_token(const struct CogsymSuite *suite,
                                     const char *language,
                                     size_t concept,
                                     uint32_t *out);

/**
 * Few-shot word-translation accuracy of `model` from `source` to `target`.
 *
 * # Safety
 * Handles must be live, names NUL-terminated, `out` writable.
 */
enum CogsymStatus cogsym_eval_word_translation(const struct CogsymModel *model,
                                               const struct CogsymSuite *suite,
                                               const char *source,
                                               const char *target,
                                               size_t n_items,
                                               uint64_t seed,
                                               double *out);

/**
 * Layers of the CogSym plan for `n_layers` and `fraction`, ascending.
 * `*n_out` receives the count even when `cap` is too small.
 *
 * # Safety
 * `layers` must point to `cap` writable slots; `n_out` writable.
 */
enum CogsymStatus cogsym_plan_layers(size_t n_layers,
                                     double fraction,
                                     size_t *layers,
                                     size_t cap,
                                     size_t *n_out);

/**
 * Hill tail-index estimate over the top `tail_fraction` of `eigs`.
 *
 * # Safety
 * `eigs` must point to `n` doubles; `out` writable.
 */
enum CogsymStatus cogsym_hill_alpha(const double *eigs,
                                    size_t n,
                                    double tail_fraction,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COGSYM_H */

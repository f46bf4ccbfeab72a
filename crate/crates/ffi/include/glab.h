#ifndef GLAB_H
#define GLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GlabStatus {
  GLAB_STATUS_OK = 0,
  GLAB_STATUS_NULL_POINTER = 1,
  GLAB_STATUS_INVALID_ARGUMENT = 2,
  GLAB_STATUS_IO = 3,
  GLAB_STATUS_NUMERIC = 4,
  GLAB_STATUS_BUFFER_TOO_SMALL = 5,
  GLAB_STATUS_INTERNAL = 6,
} GlabStatus;

/**
 * Opaque model handle.
 */
typedef struct GlabModel GlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *glab_last_error(void);

/**
 * Create the small built-in model, initialized from `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum GlabStatus glab_model_new_toy(uint64_t seed, struct GlabModel **out);

/**
 * Load a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum GlabStatus glab_model_load(const char *dir, struct GlabModel **out);

/**
 * Write a checkpoint directory.
 *
 * # Safety
 * `model` must come from a `glab_model_*` constructor; `dir` must be NUL-terminated.
 */
enum GlabStatus glab_model_save(const struct GlabModel *model, const char *dir);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle not freed before.
 */
void glab_model_free(struct GlabModel *model);

/**
 * Vocabulary size and layer count of a model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum GlabStatus glab_model_dims(const struct GlabModel *model,
                                uintptr_t *vocab_size,
                                uintptr_t *n_layers);

/**
 * Attach zero-initialized LoRA (rank 4, all projections) and identity RoPE
 * scaling to the given layers. Either list may be empty.
 *
 * # Safety
 * `model` must be a live handle; each list must hold `len` entries.
 */
enum GlabStatus glab_model_attach(struct GlabModel *model,
                                  const uintptr_t *lora_layers,
                                  uintptr_t n_lora,
                                  const uintptr_t *garfa_layers,
                                  uintptr_t n_garfa,
                                  uint64_t seed);

/**
 * Run a forward pass. Logits are written row-major as `[len, vocab]`;
 * `logits_cap` must be at least `len * vocab`.
 *
 * # Safety
 * `tokens` must hold `len` entries and `logits` `logits_cap` writable slots.
 */
enum GlabStatus glab_model_forward(const struct GlabModel *model,
                                   const uintptr_t *tokens,
                                   uintptr_t len,
                                   double *logits,
                                   uintptr_t logits_cap);

/**
 * Spearman correlation of two equal-length series and its two-sided p-value.
 *
 * # Safety
 * `x` and `y` must hold `n` entries; the out pointers must be writable.
 */
enum GlabStatus glab_spearman(const double *x,
                              const double *y,
                              uintptr_t n,
                              double *r_s,
                              double *p_value);

/**
 * Co-localization statistics of the bundled 32-layer profiles
 * (directory from `GLAB_FIXTURES` when set).
 *
 * # Safety
 * Out pointers must be writable.
 */
enum GlabStatus glab_fixture_stats(double *r_s, double *p_value, uintptr_t *overlap);

/**
 * Rank-64 LoRA parameter count on all seven projections of ten layers of an
 * 8B-class GQA model, computed from the projection shapes, next to the
 * commonly quoted figure.
 *
 * # Safety
 * Out pointers must be writable.
 */
enum GlabStatus glab_lora_param_counts(uint64_t *direct, uint64_t *published);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLAB_H */

#ifndef RATIONALE_LAB_H
#define RATIONALE_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum RlStatus {
  RL_STATUS_OK = 0,
  RL_STATUS_NULL_ARGUMENT = 1,
  RL_STATUS_INVALID_ARGUMENT = 2,
  RL_STATUS_IO = 3,
  RL_STATUS_CHECKPOINT = 4,
  RL_STATUS_DATA = 5,
  RL_STATUS_CONTRACT = 6,
  RL_STATUS_NUMERIC = 7,
  RL_STATUS_PANIC = 8,
} RlStatus;

/**
 * A loaded model with its vocabulary.
 */
typedef struct RlModel RlModel;

/**
 * Token-level precision, recall and F1.
 */
typedef struct RlPrf {
  double precision;
  double recall;
  double f1;
} RlPrf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *rl_last_error(void);

/**
 * Loads a checkpoint file. On success `*out` receives a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RlStatus rl_model_load(const char *path, struct RlModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rl_model_load`] and not be used afterwards.
 */
void rl_model_free(struct RlModel *model);

/**
 * Number of encoder layers.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RlStatus rl_model_num_layers(const struct RlModel *model, size_t *out);

/**
 * Longest accepted text, in tokens.
 *
 * # Safety
 * Pointers must be valid.
 */
enum RlStatus rl_model_max_tokens(const struct RlModel *model, size_t *out);

/**
 * Vocabulary id of `token`; `[UNK]`'s id when the token is unknown.
 *
 * # Safety
 * `token` must be NUL-terminated; pointers must be valid.
 */
enum RlStatus rl_model_token_id(const struct RlModel *model, const char *token, size_t *out);

/**
 * Predicts the label of `tokens[0..len]` and its rationale.
 *
 * `prediction` receives 0 or 1. `logits` (2 entries) and `rationale`
 * (`len` bytes, 1 = selected) are optional.
 *
 * # Safety
 * Non-null pointers must reference buffers of the stated sizes.
 */
enum RlStatus rl_model_infer(const struct RlModel *model,
                             const size_t *tokens,
                             size_t len,
                             size_t *prediction,
                             double *logits,
                             uint8_t *rationale);

/**
 * Writes each layer's kept text tokens as a `layers x len` row-major byte
 * matrix.
 *
 * # Safety
 * `out` must hold `layers * len` bytes, `layers` from
 * [`rl_model_num_layers`].
 */
enum RlStatus rl_model_layer_masks(const struct RlModel *model,
                                   const size_t *tokens,
                                   size_t len,
                                   uint8_t *out);

/**
 * Token-level precision, recall and F1 of `pred` against `gold`, both
 * `len` bytes where nonzero means selected.
 *
 * # Safety
 * `pred` and `gold` must hold `len` bytes; `out` must be valid.
 */
enum RlStatus rl_token_prf(const uint8_t *pred, const uint8_t *gold, size_t len, struct RlPrf *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RATIONALE_LAB_H */

#ifndef SMES_H
#define SMES_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SmesStatus {
  SMES_STATUS_OK = 0,
  SMES_STATUS_NULL_POINTER = 1,
  SMES_STATUS_INVALID_ARGUMENT = 2,
  SMES_STATUS_IO = 3,
  SMES_STATUS_FORMAT = 4,
  SMES_STATUS_TIMEOUT = 5,
  SMES_STATUS_INFEASIBLE = 6,
  /**
   * The metric is undefined for the input (single class, no users).
   */
  SMES_STATUS_UNDEFINED = 7,
  SMES_STATUS_BUFFER_TOO_SMALL = 8,
  SMES_STATUS_INTERNAL = 9,
} SmesStatus;

/**
 * Opaque model handle.
 */
typedef struct SmesModel SmesModel;

/**
 * Opaque workspace pool handle.
 */
typedef struct SmesPool SmesPool;

/**
 * Model shape as seen from C.
 */
typedef struct SmesDims {
  size_t features;
  size_t encoder_hidden;
  size_t d_in;
  size_t d_out;
  size_t experts;
  size_t tasks;
} SmesDims;

typedef struct SmesBlock {
  uint64_t id;
  size_t start;
  size_t len;
} SmesBlock;

typedef struct SmesPoolStats {
  size_t page_size;
  size_t page_count;
  size_t pages_in_use;
  size_t held_blocks;
  uint64_t allocations;
  uint64_t releases;
  uint64_t wait_events;
  uint64_t timeouts;
  size_t peak_pages_in_use;
} SmesPoolStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * success. The pointer stays valid until the next call on this thread.
 */
const char *smes_last_error_message(void);

/**
 * Freshly initialized progressive-routing model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum SmesStatus smes_model_new(struct SmesDims dims,
                               size_t shared,
                               size_t adaptive,
                               uint64_t seed,
                               struct SmesModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`smes_model_new`].
 */
enum SmesStatus smes_model_load(const char *path, struct SmesModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum SmesStatus smes_model_save(const struct SmesModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SmesStatus smes_model_dims(const struct SmesModel *model, struct SmesDims *out);

/**
 * Predicts `rows` instances. `features` is `rows x features` row-major;
 * `out` receives `rows x tasks` probabilities and must hold `out_len`
 * values.
 *
 * # Safety
 * Array pointers must be valid for the stated lengths.
 */
enum SmesStatus smes_model_predict(const struct SmesModel *model,
                                   const double *features,
                                   size_t rows,
                                   size_t cols,
                                   double *out,
                                   size_t out_len);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void smes_model_free(struct SmesModel *model);

/**
 * # Safety
 * `out` must be writable.
 */
enum SmesStatus smes_pool_new(size_t page_size, size_t page_count, struct SmesPool **out);

/**
 * Blocks until `pages` contiguous pages are free. A negative
 * `timeout_ms` waits indefinitely.
 *
 * # Safety
 * `pool` must be a live handle and `out` writable.
 */
enum SmesStatus smes_pool_allocate(const struct SmesPool *pool,
                                   size_t pages,
                                   int64_t timeout_ms,
                                   struct SmesBlock *out);

/**
 * # Safety
 * `pool` must be a live handle.
 */
enum SmesStatus smes_pool_release(const struct SmesPool *pool, uint64_t block_id);

/**
 * # Safety
 * `pool` must be a live handle and `out` writable.
 */
enum SmesStatus smes_pool_stats(const struct SmesPool *pool, struct SmesPoolStats *out);

/**
 * # Safety
 * `pool` must be NULL or a handle not yet freed, with no thread blocked
 * in [`smes_pool_allocate`] on it.
 */
void smes_pool_free(struct SmesPool *pool);

/**
 * # Safety
 * `scores` and `labels` must hold `n` values; `out` must be writable.
 */
enum SmesStatus smes_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * GAUC with integer user ids.
 *
 * # Safety
 * `scores`, `labels` and `users` must hold `n` values; `out` writable.
 */
enum SmesStatus smes_gauc(const double *scores,
                          const uint8_t *labels,
                          const uint64_t *users,
                          size_t n,
                          double *out);

/**
 * Progressive routing for one instance. `logits` is `tasks x experts`
 * row-major; `task_weights` may be NULL for uniform weights.
 * `active_out` receives `tasks x (shared + adaptive)` expert ids, each
 * row sorted ascending. `union_out` must hold `experts` values; the
 * union size is written to `union_len`.
 *
 * # Safety
 * Array pointers must be valid for the stated lengths.
 */
enum SmesStatus smes_progressive_route(const double *logits,
                                       size_t tasks,
                                       size_t experts,
                                       size_t shared,
                                       size_t adaptive,
                                       const double *task_weights,
                                       uint32_t *active_out,
                                       uint32_t *union_out,
                                       size_t *union_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMES_H */

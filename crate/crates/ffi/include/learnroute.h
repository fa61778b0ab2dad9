#ifndef LEARNROUTE_H
#define LEARNROUTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LrStatus {
  LR_STATUS_OK = 0,
  LR_STATUS_NULL_POINTER = 1,
  LR_STATUS_INVALID_ARGUMENT = 2,
  LR_STATUS_IO = 3,
  LR_STATUS_FORMAT = 4,
  LR_STATUS_DIMENSION = 5,
  LR_STATUS_RUNTIME = 6,
  LR_STATUS_PANIC = 7,
} LrStatus;

/**
 * Routing scorer selector.
 */
typedef enum LrMode {
  LR_MODE_ORIGINAL = 0,
  LR_MODE_LEARNED = 1,
} LrMode;

/**
 * Opaque index handle.
 */
typedef struct LrIndex LrIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lr_version(void);

/**
 * Message of the last failed call on this thread; empty if none. Valid
 * until the next call on the same thread.
 */
const char *lr_last_error(void);

/**
 * Opens a graph file and the fvecs base vectors it was built on.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum LrStatus lr_index_open(const char *graph_path, const char *base_path, struct LrIndex **out);

/**
 * Loads a routing model and precomputes its vertex representations.
 *
 * # Safety
 * `index` must come from [`lr_index_open`]; `model_path` must be a
 * NUL-terminated string.
 */
enum LrStatus lr_index_attach_model(struct LrIndex *index, const char *model_path);

/**
 * # Safety
 * `index` must be a live handle; outputs must be writable.
 */
enum LrStatus lr_index_shape(const struct LrIndex *index, size_t *num_vertices, size_t *dim);

/**
 * Routing scorings available for a configuration (rDCS). `routing_dim`
 * equals `full_dim` for the original scorer.
 *
 * # Safety
 * `out` must be writable.
 */
enum LrStatus lr_routing_budget(size_t dcs,
                                size_t k,
                                size_t full_dim,
                                size_t routing_dim,
                                enum LrMode mode,
                                size_t *out);

/**
 * Budgeted search for one query. Writes up to `capacity` ids, best first,
 * and the number written to `count`. `dcs_used` (nullable) receives the
 * cost including the rerank.
 *
 * # Safety
 * `query` must point to `dim` floats; `ids` to `capacity` writable slots.
 */
enum LrStatus lr_index_search(const struct LrIndex *index,
                              const float *query,
                              size_t dim,
                              size_t dcs,
                              size_t k,
                              enum LrMode mode,
                              uint32_t *ids,
                              size_t capacity,
                              size_t *count,
                              double *dcs_used);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `index` must come from [`lr_index_open`] and not be used afterwards.
 */
void lr_index_free(struct LrIndex *index);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEARNROUTE_H */

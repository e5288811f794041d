#ifndef QGNN_H
#define QGNN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum QgnnStatus {
  QGNN_STATUS_OK = 0,
  QGNN_STATUS_NULL_POINTER = 1,
  QGNN_STATUS_INVALID_ARGUMENT = 2,
  QGNN_STATUS_SHAPE = 3,
  QGNN_STATUS_FORMAT = 4,
  QGNN_STATUS_IO = 5,
  QGNN_STATUS_NON_FINITE = 6,
  QGNN_STATUS_BUFFER_TOO_SMALL = 7,
  QGNN_STATUS_GRAPH = 8,
  QGNN_STATUS_INTERNAL = 9,
  QGNN_STATUS_PANIC = 10,
} QgnnStatus;

/**
 * Opaque graph handle.
 */
typedef struct QgnnGraph QgnnGraph;

/**
 * Opaque model handle.
 */
typedef struct QgnnModel QgnnModel;

/**
 * Shape and precision of a loaded model.
 */
typedef struct QgnnModelInfo {
  /**
   * 0 for GCN, 1 for SMP.
   */
  uint32_t kind;
  /**
   * 32 for floating point, otherwise 2, 4 or 8.
   */
  uint32_t bits;
  size_t in_dim;
  size_t hidden;
  size_t classes;
  size_t layers;
  size_t weight_bytes;
} QgnnModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *qgnn_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *qgnn_last_error(void);

/**
 * Builds a graph on `num_nodes` nodes from `num_edges` undirected edges
 * `(src[i], dst[i])`. Self-loops and duplicates are dropped.
 *
 * # Safety
 * `src` and `dst` must point to `num_edges` readable values; `out` must be
 * writable.
 */
enum QgnnStatus qgnn_graph_new(size_t num_nodes,
                               const uint32_t *src,
                               const uint32_t *dst,
                               size_t num_edges,
                               struct QgnnGraph **out);

/**
 * Node count of a graph, 0 for null.
 *
 * # Safety
 * `graph` must be null or a live handle.
 */
size_t qgnn_graph_num_nodes(const struct QgnnGraph *graph);

/**
 * # Safety
 * `graph` must be null or a handle from [`qgnn_graph_new`] not yet freed.
 */
void qgnn_graph_free(struct QgnnGraph *graph);

/**
 * Loads a packed model file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be writable.
 */
enum QgnnStatus qgnn_model_load(const char *path, struct QgnnModel **out);

/**
 * Loads a packed model from `len` bytes in memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum QgnnStatus qgnn_model_load_bytes(const uint8_t *data, size_t len, struct QgnnModel **out);

/**
 * # Safety
 * `model` must be null or a handle from a load call not yet freed.
 */
void qgnn_model_free(struct QgnnModel *model);

/**
 * # Safety
 * `model` must be a live handle; `info` must be writable.
 */
enum QgnnStatus qgnn_model_info(const struct QgnnModel *model, struct QgnnModelInfo *info);

/**
 * Runs inference on row-major `features` (`num_nodes × in_dim`).
 *
 * `logits` receives `num_nodes × classes` values and must hold at least
 * that many. `predictions` may be null; otherwise it receives `num_nodes`
 * class indices.
 *
 * # Safety
 * Pointers must be live and sized as stated by the length arguments.
 */
enum QgnnStatus qgnn_infer(const struct QgnnModel *model,
                           const struct QgnnGraph *graph,
                           const double *features,
                           size_t features_len,
                           double *logits,
                           size_t logits_len,
                           uint32_t *predictions,
                           size_t predictions_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QGNN_H */

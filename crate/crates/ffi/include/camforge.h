#ifndef CAMFORGE_H
#define CAMFORGE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum CfStatus {
  CF_STATUS_OK = 0,
  CF_STATUS_NULL_POINTER = 1,
  CF_STATUS_INVALID_UTF8 = 2,
  CF_STATUS_IO = 3,
  CF_STATUS_PARSE = 4,
  CF_STATUS_BOUNDS = 5,
  CF_STATUS_IMAGE = 6,
  CF_STATUS_SHAPE = 7,
  CF_STATUS_NUMERIC = 8,
  CF_STATUS_RANGE = 9,
  CF_STATUS_ARGUMENT = 10,
  CF_STATUS_CONSISTENCY = 11,
  CF_STATUS_CONFIG = 12,
  CF_STATUS_TAG = 13,
  CF_STATUS_TRAINING = 14,
  CF_STATUS_BUFFER_TOO_SMALL = 15,
  CF_STATUS_PANIC = 16,
} CfStatus;

// CAM method selector.
typedef enum CfMethod {
  CF_METHOD_GRAD_CAM = 0,
  CF_METHOD_GRAD_CAM_PLUS_PLUS = 1,
  CF_METHOD_SCORE_CAM = 2,
  CF_METHOD_LAYER_CAM = 3,
  CF_METHOD_COMBI_CAM = 4,
} CfMethod;

// An input-aligned heatmap.
typedef struct CfHeatmap CfHeatmap;

// A loaded network.
typedef struct CfNetwork CfNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty if none. Valid
// until the next failing call on the same thread.
const char *cf_last_error(void);

// Loads a model from a JSON manifest and CWGT weights file.
//
// # Safety
// `manifest_path` and `weights_path` must be NUL-terminated strings and
// `out` a valid pointer.
enum CfStatus cf_network_load(const char *manifest_path,
                              const char *weights_path,
                              struct CfNetwork **out);

// # Safety
// `net` must come from [`cf_network_load`] and not be freed twice.
void cf_network_free(struct CfNetwork *net);

// Writes the `[C, H, W]` input shape.
//
// # Safety
// All pointers must be valid.
enum CfStatus cf_network_input_dims(const struct CfNetwork *net,
                                    size_t *channels,
                                    size_t *height,
                                    size_t *width);

// Number of classes and number of blocks.
//
// # Safety
// All pointers must be valid.
enum CfStatus cf_network_counts(const struct CfNetwork *net, size_t *classes, size_t *blocks);

// Computes an input-aligned heatmap.
//
// `input` holds `C*H*W` preprocessed values in row-major order.
// A negative `class_index` explains the predicted class. With
// `block_count == 0` the default layer set is used: every block for
// Combi-CAM and Layer-CAM, the last block otherwise.
//
// # Safety
// `input` must point to `input_len` doubles, `blocks` to `block_count`
// values (or be null when zero), and `out` must be valid.
enum CfStatus cf_explain(const struct CfNetwork *net,
                         const double *input,
                         size_t input_len,
                         enum CfMethod method,
                         int64_t class_index,
                         const size_t *blocks,
                         size_t block_count,
                         bool per_layer_normalize,
                         struct CfHeatmap **out);

// # Safety
// `map` must come from [`cf_explain`] and not be freed twice.
void cf_heatmap_free(struct CfHeatmap *map);

// # Safety
// All pointers must be valid.
enum CfStatus cf_heatmap_dims(const struct CfHeatmap *map,
                              size_t *height,
                              size_t *width,
                              size_t *class_index);

// Row-major `H*W` values, valid until the heatmap is freed; null for a
// null handle.
//
// # Safety
// `map` must be null or a live handle.
const double *cf_heatmap_data(const struct CfHeatmap *map);

// Peak unnormalised Grad-CAM value per block, in block order.
//
// Writes up to `capacity` values to `values` and the block count to
// `written`; returns `BufferTooSmall` (with `written` set) when the buffer
// is short.
//
// # Safety
// `input` must point to `input_len` doubles, `values` to `capacity`
// doubles, and `written` must be valid.
enum CfStatus cf_activation_profile(const struct CfNetwork *net,
                                    const double *input,
                                    size_t input_len,
                                    int64_t class_index,
                                    double *values,
                                    size_t capacity,
                                    size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMFORGE_H */

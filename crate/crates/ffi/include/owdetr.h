#ifndef OWDETR_H
#define OWDETR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OwdetrStatus {
  OWDETR_STATUS_OK = 0,
  OWDETR_STATUS_NULL_ARGUMENT = 1,
  OWDETR_STATUS_INVALID_UTF8 = 2,
  OWDETR_STATUS_DIMENSION = 3,
  OWDETR_STATUS_CONTRACT = 4,
  OWDETR_STATUS_CAPACITY = 5,
  OWDETR_STATUS_SCORE = 6,
  OWDETR_STATUS_DIVERGENCE = 7,
  OWDETR_STATUS_CONFIG = 8,
  OWDETR_STATUS_PARSE = 9,
  OWDETR_STATUS_VERSION = 10,
  OWDETR_STATUS_CHECKSUM = 11,
  OWDETR_STATUS_TRUNCATED = 12,
  OWDETR_STATUS_MISSING = 13,
  OWDETR_STATUS_IO = 14,
  OWDETR_STATUS_PANIC = 15,
} OwdetrStatus;

// Detections of one image, highest score first.
typedef struct OwdetrDetections OwdetrDetections;

// A trained detector loaded from a checkpoint.
typedef struct OwdetrModel OwdetrModel;

// One detection; the box is center format in normalized image coordinates.
typedef struct OwdetrDetection {
  // 0 is the unknown class.
  uint32_t label;
  double score;
  double cx;
  double cy;
  double w;
  double h;
} OwdetrDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string.
//
// The pointer stays valid until the next call into this library on the same thread.
const char *owdetr_last_error(void);

// Library version as a static NUL-terminated string.
const char *owdetr_version(void);

// Loads a checkpoint file into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum OwdetrStatus owdetr_model_load(const char *path, struct OwdetrModel **out);

// # Safety
// `model` must come from [`owdetr_model_load`] and not be used afterwards. Null is ignored.
void owdetr_model_free(struct OwdetrModel *model);

// Classifier width: one unknown column plus one per known class.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum OwdetrStatus owdetr_model_class_width(const struct OwdetrModel *model, uintptr_t *out);

// Copies up to `cap` known labels in column order into `buf` and stores the full count in `len`.
//
// # Safety
// `model` must be a live handle, `buf` valid for `cap` writes (or null when `cap` is 0), `len` valid.
enum OwdetrStatus owdetr_model_known_labels(const struct OwdetrModel *model,
                                            uint32_t *buf,
                                            uintptr_t cap,
                                            uintptr_t *len);

// Runs the detector on one `channels×height×width` image of row-major pixels.
//
// `top_k` of 0 selects the default of 50. The result is capped at queries × classifier width.
//
// # Safety
// `pixels` must hold `channels*height*width` values; `model` must be live and `out` valid.
enum OwdetrStatus owdetr_model_infer(const struct OwdetrModel *model,
                                     const double *pixels,
                                     uintptr_t channels,
                                     uintptr_t height,
                                     uintptr_t width,
                                     uintptr_t top_k,
                                     struct OwdetrDetections **out);

// Number of detections in the set; 0 for null.
//
// # Safety
// `dets` must be a live handle or null.
uintptr_t owdetr_detections_len(const struct OwdetrDetections *dets);

// Copies detection `index` into `out`.
//
// # Safety
// `dets` must be a live handle and `out` a valid pointer.
enum OwdetrStatus owdetr_detections_get(const struct OwdetrDetections *dets,
                                        uintptr_t index,
                                        struct OwdetrDetection *out);

// # Safety
// `dets` must come from [`owdetr_model_infer`] and not be used afterwards. Null is ignored.
void owdetr_detections_free(struct OwdetrDetections *dets);

// Minimum-cost assignment of each of `cols` ground truths to a distinct query among `rows`.
//
// `cost` is row-major `rows×cols` (query × ground truth). On success `query_of_gt[g]`
// holds the query assigned to ground truth `g`.
//
// # Safety
// `cost` must hold `rows*cols` values and `query_of_gt` must be valid for `cols` writes.
enum OwdetrStatus owdetr_hungarian(const double *cost,
                                   uintptr_t rows,
                                   uintptr_t cols,
                                   uintptr_t *query_of_gt);

// Mean of a `rows×cols` attention map over the window of a box (normalized center format).
//
// # Safety
// `attention` must hold `rows*cols` values and `out` must be valid.
enum OwdetrStatus owdetr_objectness_score(const double *attention,
                                          uintptr_t rows,
                                          uintptr_t cols,
                                          double cx,
                                          double cy,
                                          double w,
                                          double h,
                                          double *out);

// Scores a detections file against a test manifest and returns the report as JSON.
//
// `task` is 1-based. Ground truth outside `previous ∪ current` counts as unknown.
// The returned string must be released with [`owdetr_string_free`].
//
// # Safety
// Paths must be NUL-terminated; label arrays must hold the given counts; `out_json` must be valid.
enum OwdetrStatus owdetr_evaluate_files(const char *detections_path,
                                        const char *manifest_path,
                                        uintptr_t task,
                                        const uint32_t *previous,
                                        uintptr_t n_previous,
                                        const uint32_t *current,
                                        uintptr_t n_current,
                                        char **out_json);

// # Safety
// `s` must come from this library and not be used afterwards. Null is ignored.
void owdetr_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OWDETR_H */

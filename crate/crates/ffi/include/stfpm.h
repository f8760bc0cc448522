#ifndef STFPM_H
#define STFPM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The numeric values of the error classes match the exit
 * codes of the command-line tool.
 */
typedef enum StfpmStatus {
  STFPM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  STFPM_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration, arguments or weights.
   */
  STFPM_STATUS_CONFIG = 2,
  /**
   * Malformed input data or mismatched dimensions.
   */
  STFPM_STATUS_DATA = 3,
  STFPM_STATUS_TRAINING = 4,
  /**
   * The metric is undefined for the given labels.
   */
  STFPM_STATUS_METRIC = 5,
  STFPM_STATUS_IO = 6,
  /**
   * The output buffer is smaller than required.
   */
  STFPM_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * An internal error was caught at the boundary.
   */
  STFPM_STATUS_INTERNAL = 8,
} StfpmStatus;

/**
 * A teacher and trained student ready to score images.
 */
typedef struct StfpmDetector StfpmDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *stfpm_version(void);

/**
 * Message of the most recent failure on this thread, or null when the
 * last call succeeded. Valid until the next library call on this thread.
 */
const char *stfpm_last_error(void);

/**
 * Loads a teacher archive and a student checkpoint trained against it.
 *
 * # Safety
 * `teacher_path` and `checkpoint_path` must be NUL-terminated strings and
 * `out` a valid pointer. On success `*out` owns a detector that must be
 * released with [`stfpm_detector_free`].
 */
enum StfpmStatus stfpm_detector_open(const char *teacher_path,
                                     const char *checkpoint_path,
                                     struct StfpmDetector **out);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `detector` must come from [`stfpm_detector_open`] and not be used again.
 */
void stfpm_detector_free(struct StfpmDetector *detector);

/**
 * Side length of the square anomaly maps this detector produces.
 *
 * # Safety
 * `detector` must be a live handle and `out` a valid pointer.
 */
enum StfpmStatus stfpm_detector_input_size(const struct StfpmDetector *detector, size_t *out);

/**
 * Scores one interleaved RGB image of any size. The image is resized to
 * the detector's input size; the anomaly map (row-major, `size * size`
 * values, see [`stfpm_detector_input_size`]) is written to `map_out` when it
 * is non-null, and the image score (the map maximum) to `score_out`.
 *
 * # Safety
 * `pixels` must hold `height * row_stride` bytes with `row_stride >= 3 *
 * width`; `map_out`, when non-null, must hold `map_len` doubles.
 */
enum StfpmStatus stfpm_detector_score_rgb8(const struct StfpmDetector *detector,
                                           const uint8_t *pixels,
                                           uint32_t width,
                                           uint32_t height,
                                           size_t row_stride,
                                           double *map_out,
                                           size_t map_len,
                                           double *score_out);

/**
 * Like [`stfpm_detector_score_rgb8`] but reads an image file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; pointer rules as in
 * [`stfpm_detector_score_rgb8`].
 */
enum StfpmStatus stfpm_detector_score_file(const struct StfpmDetector *detector,
                                           const char *path,
                                           double *map_out,
                                           size_t map_len,
                                           double *score_out);

/**
 * Area under the ROC curve of `scores` against binary `labels` (non-zero
 * is positive).
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` must be valid.
 */
enum StfpmStatus stfpm_roc_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Normalized area under the PRO curve up to `fpr_limit`, for `count` maps
 * of `width * height` scores with matching 0/1 masks, all row-major and
 * concatenated. `per_image_fpr` non-zero averages false positive rates
 * per image instead of pooling them.
 *
 * # Safety
 * `maps` must hold `count * width * height` doubles and `masks` as many
 * bytes; `out` must be valid.
 */
enum StfpmStatus stfpm_pro_score(const double *maps,
                                 const uint8_t *masks,
                                 size_t count,
                                 size_t width,
                                 size_t height,
                                 double fpr_limit,
                                 size_t steps,
                                 int32_t per_image_fpr,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STFPM_H */

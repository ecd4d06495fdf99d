#ifndef SFOD_H
#define SFOD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SfodStatus {
  SFOD_STATUS_OK = 0,
  SFOD_STATUS_NULL_POINTER = 1,
  SFOD_STATUS_INVALID_ARGUMENT = 2,
  SFOD_STATUS_CONFIG = 3,
  SFOD_STATUS_MISMATCH = 4,
  SFOD_STATUS_IO = 5,
  SFOD_STATUS_FORMAT = 6,
  SFOD_STATUS_NUMERICS = 7,
  // The output buffer is too small; the required length was written.
  SFOD_STATUS_BUFFER_TOO_SMALL = 8,
  SFOD_STATUS_PANIC = 9,
} SfodStatus;

// Loaded dataset split.
typedef struct SfodDataset SfodDataset;

// Loaded detector weights.
typedef struct SfodModel SfodModel;

// One detection; box in normalized centre format.
typedef struct SfodDetection {
  // 1-based class.
  uint32_t class_id;
  double score;
  double cx;
  double cy;
  double w;
  double h;
} SfodDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
// message length in bytes, 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t sfod_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *sfod_version(void);

// Loads a pretraining or adaptation checkpoint. Adaptation checkpoints yield
// the teacher unless `student` is non-zero.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SfodStatus sfod_model_load(const char *path, int32_t student, struct SfodModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`sfod_model_load`] and not be used afterwards.
void sfod_model_free(struct SfodModel *model);

// Input geometry and class count of a model. Images are `height * width * 3`
// values, row-major with interleaved channels in [0, 1].
//
// # Safety
// `model` must be a live handle; the outputs must be valid pointers.
enum SfodStatus sfod_model_info(const struct SfodModel *model,
                                size_t *height,
                                size_t *width,
                                size_t *num_classes,
                                size_t *num_queries);

// Runs the detector on one image and writes detections scoring at least
// `score_floor`. `*written` receives the detection count; when it exceeds
// `capacity` nothing is copied and `BufferTooSmall` is returned. At most
// `num_queries` detections are produced.
//
// # Safety
// `image` must hold `image_len` values, `out` must be null or hold
// `capacity` entries, and `written` must be valid.
enum SfodStatus sfod_model_detect(const struct SfodModel *model,
                                  const double *image,
                                  size_t image_len,
                                  double score_floor,
                                  struct SfodDetection *out,
                                  size_t capacity,
                                  size_t *written);

// Loads a dataset split written by `sfod gen-data`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SfodStatus sfod_dataset_load(const char *path, struct SfodDataset **out);

// Number of images in a dataset, 0 for null.
//
// # Safety
// `data` must be null or a live handle.
size_t sfod_dataset_len(const struct SfodDataset *data);

// Releases a dataset. Null is ignored.
//
// # Safety
// `data` must come from [`sfod_dataset_load`] and not be used afterwards.
void sfod_dataset_free(struct SfodDataset *data);

// mAP at the given IoU threshold over a dataset.
//
// # Safety
// Handles must be live and `map` valid.
enum SfodStatus sfod_model_evaluate(const struct SfodModel *model,
                                    const struct SfodDataset *data,
                                    double iou_thresh,
                                    double score_floor,
                                    double *map);

// Teacher update interval for an epoch under the dynamic schedule.
uint64_t sfod_dtui_interval(uint64_t epoch, uint64_t delta, uint64_t eps);

// Minimum-cost assignment on a row-major `rows x cols` matrix. Writes the
// matched column of each row into `assignment` (-1 when unmatched) and the
// summed cost into `total`.
//
// # Safety
// `cost` must hold `rows * cols` values, `assignment` `rows` entries, and
// `total` must be valid.
enum SfodStatus sfod_hungarian(const double *cost,
                               size_t rows,
                               size_t cols,
                               int64_t *assignment,
                               double *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFOD_H */

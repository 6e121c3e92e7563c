#ifndef CMT_H
#define CMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which weights of a checkpoint to load.
 */
typedef enum CmtModel {
  CMT_MODEL_TEACHER = 0,
  CMT_MODEL_STUDENT = 1,
} CmtModel;

/**
 * Result code of every fallible call.
 */
typedef enum CmtStatus {
  CMT_STATUS_OK = 0,
  CMT_STATUS_NULL_POINTER = 1,
  CMT_STATUS_INVALID_ARGUMENT = 2,
  CMT_STATUS_SHAPE_MISMATCH = 3,
  CMT_STATUS_IO = 4,
  CMT_STATUS_FORMAT = 5,
  CMT_STATUS_CONFIG_INVALID = 6,
  CMT_STATUS_EMPTY_BATCH = 7,
  CMT_STATUS_NUMERIC = 8,
  CMT_STATUS_BUFFER_TOO_SMALL = 9,
  CMT_STATUS_PANIC = 10,
} CmtStatus;

/**
 * A generated or loaded benchmark.
 */
typedef struct CmtDataset CmtDataset;

/**
 * Detector weights plus the architecture they belong to.
 */
typedef struct CmtDetector CmtDetector;

/**
 * One decoded detection in pixel coordinates.
 */
typedef struct CmtDetection {
  double x1;
  double y1;
  double x2;
  double y2;
  uint32_t class_id;
  double score;
} CmtDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `capacity`. Returns the full message
 * length without the terminator; pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t cmt_last_error_message(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cmt_version(void);

/**
 * Loads one model of a JSON checkpoint written by `cmt train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CmtStatus cmt_detector_load(const char *path, enum CmtModel model, struct CmtDetector **out);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `det` must be null or a handle from [`cmt_detector_load`] not yet freed.
 */
void cmt_detector_free(struct CmtDetector *det);

/**
 * Runs the detector on one `[3, height, width]` image with values in
 * [0, 1], decoding with the evaluation thresholds. Up to `capacity`
 * detections are written to `out`; `count` receives the total, so a
 * larger total than `capacity` yields `BufferTooSmall`.
 *
 * # Safety
 * `pixels` must hold `3 * height * width` doubles and `out` must be valid
 * for `capacity` elements.
 */
enum CmtStatus cmt_detector_detect(const struct CmtDetector *det,
                                   const double *pixels,
                                   size_t height,
                                   size_t width,
                                   struct CmtDetection *out,
                                   size_t capacity,
                                   size_t *count);

/**
 * Generates a benchmark with the default scene generator and the given
 * target-domain degradation.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CmtStatus cmt_dataset_generate(uint64_t seed,
                                    size_t train_scenes,
                                    size_t eval_scenes,
                                    double fog_density,
                                    double blur_sigma,
                                    struct CmtDataset **out);

/**
 * Loads a dataset directory written by `cmt gen-data`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CmtStatus cmt_dataset_load(const char *dir, struct CmtDataset **out);

/**
 * Writes PNGs, annotations and a manifest under `dir`.
 *
 * # Safety
 * `ds` must be a live handle and `dir` a NUL-terminated string.
 */
enum CmtStatus cmt_dataset_write(const struct CmtDataset *ds, const char *dir);

/**
 * Number of target-domain evaluation images.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t cmt_dataset_num_eval(const struct CmtDataset *ds);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void cmt_dataset_free(struct CmtDataset *ds);

/**
 * mAP at IoU 0.5 of `det` on the dataset's target evaluation split.
 *
 * # Safety
 * Both handles must be live and `map50` valid.
 */
enum CmtStatus cmt_evaluate(const struct CmtDetector *det,
                            const struct CmtDataset *ds,
                            double *map50);

/**
 * Class-based contrastive loss over `n` student/teacher feature pairs of
 * length `dim`, row-major. Features are used as given.
 *
 * # Safety
 * `student` and `teacher` must hold `n * dim` doubles, `classes` `n` values.
 */
enum CmtStatus cmt_contrastive_loss(const double *student,
                                    const double *teacher,
                                    const uint32_t *classes,
                                    size_t n,
                                    size_t dim,
                                    double tau,
                                    double lambda,
                                    double *out);

/**
 * Instance-discrimination loss with in-batch negatives; same layout as
 * [`cmt_contrastive_loss`]. Needs `n >= 2`.
 *
 * # Safety
 * `query` and `key` must hold `n * dim` doubles.
 */
enum CmtStatus cmt_moco_loss(const double *query,
                             const double *key,
                             size_t n,
                             size_t dim,
                             double tau,
                             double *out);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes.
 *
 * # Safety
 * `a` and `b` must point to 4 doubles each.
 */
enum CmtStatus cmt_iou(const double *a, const double *b, double *out);

/**
 * `teacher[i] <- alpha * teacher[i] + (1 - alpha) * student[i]` in place.
 *
 * # Safety
 * `teacher` must be valid for `len` writes and `student` for `len` reads.
 */
enum CmtStatus cmt_ema_update(double *teacher, const double *student, size_t len, double alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMT_H */

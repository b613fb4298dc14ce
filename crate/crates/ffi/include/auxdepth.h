#ifndef AUXDEPTH_H
#define AUXDEPTH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define AD_KIND_LEN 32

typedef enum AdStatus {
  AD_STATUS_OK = 0,
  AD_STATUS_NULL_POINTER = 1,
  AD_STATUS_INVALID_ARGUMENT = 2,
  AD_STATUS_PARSE = 3,
  AD_STATUS_IO = 4,
  AD_STATUS_CONFIG = 5,
  AD_STATUS_DIMENSION = 6,
  AD_STATUS_BUFFER_TOO_SMALL = 7,
  AD_STATUS_FAILURE = 8,
  AD_STATUS_PANIC = 9,
} AdStatus;

// Opaque depth-bin discretization.
typedef struct AdLid AdLid;

// Opaque loaded detector.
typedef struct AdModel AdModel;

// 3D box: bottom-face center `(x, y, z)` in camera coordinates, size `h, w, l`,
// yaw `ry` about the camera y axis.
typedef struct AdBox3d {
  double x;
  double y;
  double z;
  double h;
  double w;
  double l;
  double ry;
} AdBox3d;

// Image box `[x1, x2) × [y1, y2)` in pixels.
typedef struct AdBox2d {
  double x1;
  double y1;
  double x2;
  double y2;
} AdBox2d;

// One KITTI label line. `kind` is NUL-terminated and truncated to fit.
typedef struct AdLabel {
  char kind[AD_KIND_LEN];
  double truncated;
  int32_t occluded;
  double alpha;
  struct AdBox2d bbox;
  struct AdBox3d box3d;
  // Nonzero when `score` is present.
  int32_t has_score;
  double score;
} AdLabel;

// AP40 per difficulty (Easy, Moderate, Hard) in percent.
typedef struct AdEvalResult {
  double ap_3d[3];
  double ap_bev[3];
} AdEvalResult;

// One detection in source-image coordinates.
typedef struct AdDetection {
  uint32_t class_id;
  double score;
  struct AdBox2d bbox;
  struct AdBox3d box3d;
} AdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. Valid until the next
// failing call on the same thread.
const char *ad_last_error(void);

// Library version as a static NUL-terminated string.
const char *ad_version(void);

// Creates a discretization of `[d_min, d_max]` into `bins` bins.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum AdStatus ad_lid_new(double d_min, double d_max, size_t bins, struct AdLid **out);

// # Safety
// `lid` must come from [`ad_lid_new`] and not be used afterwards; null is ignored.
void ad_lid_free(struct AdLid *lid);

// Writes the `bins + 1` bin edges into `edges`, which holds `len` values.
//
// # Safety
// `lid` must be a live handle and `edges` must point to `len` writable doubles.
enum AdStatus ad_lid_edges(const struct AdLid *lid, double *edges, size_t len);

// # Safety
// `lid` must be a live handle and `bin` writable.
enum AdStatus ad_lid_depth_to_bin(const struct AdLid *lid, double depth, size_t *bin);

// # Safety
// `lid` must be a live handle and `center` writable.
enum AdStatus ad_lid_bin_center(const struct AdLid *lid, size_t bin, double *center);

// Bird's-eye-view IoU of two boxes.
//
// # Safety
// `a` and `b` must be readable and `iou` writable.
enum AdStatus ad_iou_bev(const struct AdBox3d *a, const struct AdBox3d *b, double *iou);

// Volumetric IoU of two boxes.
//
// # Safety
// `a` and `b` must be readable and `iou` writable.
enum AdStatus ad_iou_3d(const struct AdBox3d *a, const struct AdBox3d *b, double *iou);

// Greedy 2D NMS. Writes kept indices, highest score first, into `keep` (capacity
// `n`) and their number into `kept`.
//
// # Safety
// `boxes` and `scores` must hold `n` readable values, `keep` `n` writable values.
enum AdStatus ad_nms(const struct AdBox2d *boxes,
                     const double *scores,
                     size_t n,
                     double iou_threshold,
                     size_t *keep,
                     size_t *kept);

// Parses one label line.
//
// # Safety
// `line` must be a NUL-terminated string and `out` writable.
enum AdStatus ad_parse_label_line(const char *line, struct AdLabel *out);

// Evaluates the prediction directory against the label directory for `class`.
//
// # Safety
// String arguments must be NUL-terminated and `out` writable.
enum AdStatus ad_evaluate_dirs(const char *pred_dir,
                               const char *gt_dir,
                               const char *class_,
                               double iou_threshold,
                               struct AdEvalResult *out);

// Loads a detector. `config_path` may be null for the default profile;
// `checkpoint_path` may be null for freshly initialized weights.
//
// # Safety
// Non-null strings must be NUL-terminated; `out` must be writable.
enum AdStatus ad_model_load(const char *config_path,
                            const char *checkpoint_path,
                            struct AdModel **out);

// Runs the detector on an interleaved 8-bit RGB image of `width × height` with
// row-major projection matrix `p2[12]`. Writes up to `capacity` detections and
// the total found into `count`; returns `BufferTooSmall` when they do not fit.
//
// # Safety
// `model` must be live, `rgb` must hold `3·width·height` bytes, `p2` 12 doubles,
// `detections` `capacity` writable entries, and `count` must be writable.
enum AdStatus ad_model_detect(const struct AdModel *model,
                              const uint8_t *rgb,
                              size_t width,
                              size_t height,
                              const double *p2,
                              struct AdDetection *detections,
                              size_t capacity,
                              size_t *count);

// # Safety
// `model` must come from [`ad_model_load`] and not be used afterwards; null is ignored.
void ad_model_free(struct AdModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUXDEPTH_H */

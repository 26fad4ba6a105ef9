#ifndef PAGBOX_H
#define PAGBOX_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PagboxStatus {
  PAGBOX_STATUS_OK = 0,
  PAGBOX_STATUS_NULL_POINTER = 1,
  PAGBOX_STATUS_INVALID_ARGUMENT = 2,
  PAGBOX_STATUS_IO = 3,
  PAGBOX_STATUS_SCHEMA = 4,
  PAGBOX_STATUS_DOMAIN = 5,
  PAGBOX_STATUS_PANIC = 6,
} PagboxStatus;

/*
 Opaque evaluation result.
 */
typedef struct PagboxReport PagboxReport;

typedef struct PagboxCuboid {
  double center[3];
  double size[3];
  /*
   Row-major; columns are the box axes in camera coordinates.
   */
  double rotation[9];
} PagboxCuboid;

typedef struct PagboxIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
} PagboxIntrinsics;

/*
 Summary row of an evaluation; a metric with no contributing instance is NaN.
 */
typedef struct PagboxAggregate {
  size_t instances;
  double pag_uv;
  double pag_d;
  double nhd;
  double iou3d;
} PagboxAggregate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer stays
 valid until the next call into the library from the same thread.
 */
const char *pagbox_last_error(void);

/*
 Static, nul-terminated library version.
 */
const char *pagbox_version(void);

/*
 Eight corners `x y z` of a cuboid in the sign-bit template order.

 # Safety
 `cuboid` must point to a valid struct and `out_points` to 24 doubles.
 */
enum PagboxStatus pagbox_cuboid_corners(const struct PagboxCuboid *cuboid, double *out_points);

/*
 Pinhole projection of eight camera-frame points.

 # Safety
 `points` must hold 24 doubles, `out_uv` 16 and `out_depths` 8.
 */
enum PagboxStatus pagbox_project(const double *points,
                                 const struct PagboxIntrinsics *k,
                                 double *out_uv,
                                 double *out_depths);

/*
 Closest valid cuboid to eight camera-frame points in any order.

 # Safety
 `points` must hold 24 doubles and `out` must be writable.
 */
enum PagboxStatus pagbox_rectify(const double *points, struct PagboxCuboid *out);

/*
 Exact intersection-over-union of two oriented boxes.

 # Safety
 All pointers must be valid.
 */
enum PagboxStatus pagbox_iou3d(const struct PagboxCuboid *a,
                               const struct PagboxCuboid *b,
                               double *out);

/*
 Minimum-cost assignment on a row-major 8x8 matrix; row `i` goes to column
 `out_assignment[i]`.

 # Safety
 `cost` must hold 64 doubles and `out_assignment` 8 entries; `out_cost` may
 be null.
 */
enum PagboxStatus pagbox_hungarian(const double *cost, uint32_t *out_assignment, double *out_cost);

/*
 Mean corner distance in pixels and mean relative depth error in percent
 between corresponding corners; both sets use metric depth.

 # Safety
 `*_uv` must hold 16 doubles, `*_depths` 8, outputs must be writable.
 */
enum PagboxStatus pagbox_pag(const double *pred_uv,
                             const double *pred_depths,
                             const double *gt_uv,
                             const double *gt_depths,
                             double *out_pag_uv,
                             double *out_pag_d);

/*
 Soft-argmax corners and sampled depths from channel-major `8 x height x
 width` heat and depth planes, mapped to an `image_w x image_h` image.

 # Safety
 `heat` and `depth` must hold `8 * width * height` doubles, `out_uv` 16
 and `out_depths` 8.
 */
enum PagboxStatus pagbox_extract_corners(const double *heat,
                                         const double *depth,
                                         size_t width,
                                         size_t height,
                                         double image_w,
                                         double image_h,
                                         double beta,
                                         double *out_uv,
                                         double *out_depths);

/*
 Evaluates a prediction file against an annotation file with default
 options. On success `*out` owns a report to release with
 [`pagbox_report_free`].

 # Safety
 Paths must be nul-terminated UTF-8; `out` must be writable.
 */
enum PagboxStatus pagbox_evaluate_files(const char *gt_path,
                                        const char *pred_path,
                                        struct PagboxReport **out);

/*
 Global (instance-weighted) summary of a report.

 # Safety
 `report` must come from [`pagbox_evaluate_files`]; `out` must be writable.
 */
enum PagboxStatus pagbox_report_global(const struct PagboxReport *report,
                                       struct PagboxAggregate *out);

/*
 Report as a JSON string owned by the caller; release it with
 [`pagbox_string_free`]. Returns null when `report` is null.

 # Safety
 `report` must be null or come from [`pagbox_evaluate_files`].
 */
char *pagbox_report_json(const struct PagboxReport *report);

/*
 # Safety
 `report` must be null or come from [`pagbox_evaluate_files`], and must not
 be used afterwards.
 */
void pagbox_report_free(struct PagboxReport *report);

/*
 # Safety
 `s` must be null or come from this library, and must not be used
 afterwards.
 */
void pagbox_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAGBOX_H */

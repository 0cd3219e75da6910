#ifndef TRACERSEG_H
#define TRACERSEG_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Tracer codes written by [`ts_predict_tracer`].
 */
#define TS_TRACER_FDG 0

#define TS_TRACER_PSMA 1

/**
 * Side length of the discriminator MIP.
 */
#define TS_MIP_SIZE 224

/**
 * Result code of every fallible call.
 */
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_IO = 3,
  TS_STATUS_FORMAT = 4,
  TS_STATUS_SHAPE_MISMATCH = 5,
  TS_STATUS_PANIC = 6,
} TsStatus;

/**
 * Meaning of a volume's scalars.
 */
typedef enum TsVolumeKind {
  TS_VOLUME_KIND_PET_SUV = 0,
  TS_VOLUME_KIND_CT_HU = 1,
  TS_VOLUME_KIND_LABEL = 2,
  TS_VOLUME_KIND_PROBABILITY = 3,
} TsVolumeKind;

/**
 * Opaque discriminator model.
 */
typedef struct TsModel TsModel;

/**
 * Opaque 3D volume.
 */
typedef struct TsVolume TsVolume;

/**
 * Per-case segmentation scores.
 */
typedef struct TsCaseMetrics {
  /**
   * NaN when both masks are empty.
   */
  double dice;
  bool dice_defined;
  uint64_t fpv_voxels;
  double fpv_ml;
  uint64_t fnv_voxels;
  double fnv_ml;
  uint64_t n_pred_components;
  uint64_t n_gt_components;
} TsCaseMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *ts_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ts_version(void);

/**
 * Read a NIfTI-1 file. `kind` < 0 infers the kind from the datatype.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum TsStatus ts_volume_read(const char *path, int32_t kind, struct TsVolume **out);

/**
 * Write a volume; a `.gz` suffix selects gzip.
 *
 * # Safety
 * `vol` must come from this library and `path` be NUL-terminated.
 */
enum TsStatus ts_volume_write(const struct TsVolume *vol, const char *path);

/**
 * Build a volume from `nx·ny·nz` doubles in x-fastest order.
 *
 * # Safety
 * `spacing` must point to 3 doubles and `data` to `len` doubles.
 */
enum TsStatus ts_volume_new(size_t nx,
                            size_t ny,
                            size_t nz,
                            const double *spacing,
                            enum TsVolumeKind kind,
                            const double *data,
                            size_t len,
                            struct TsVolume **out);

/**
 * Release a volume. Null is ignored.
 *
 * # Safety
 * `vol` must come from this library and not be used afterwards.
 */
void ts_volume_free(struct TsVolume *vol);

/**
 * # Safety
 * `vol` must come from this library; `shape` must hold 3 elements.
 */
enum TsStatus ts_volume_shape(const struct TsVolume *vol, size_t *shape);

/**
 * # Safety
 * `vol` must come from this library; `spacing` must hold 3 elements.
 */
enum TsStatus ts_volume_spacing(const struct TsVolume *vol, double *spacing);

/**
 * # Safety
 * `vol` must come from this library.
 */
enum TsStatus ts_volume_kind(const struct TsVolume *vol, enum TsVolumeKind *kind);

/**
 * Voxel count, 0 for a null handle.
 *
 * # Safety
 * `vol` must be null or come from this library.
 */
size_t ts_volume_len(const struct TsVolume *vol);

/**
 * Borrowed pointer to the voxel data, valid while the handle lives.
 *
 * # Safety
 * `vol` must be null or come from this library.
 */
const double *ts_volume_data(const struct TsVolume *vol);

/**
 * Resample onto `spacing` (3 doubles). `nearest` selects nearest-neighbour
 * (label volumes); otherwise trilinear.
 *
 * # Safety
 * `vol` must come from this library, `spacing` point to 3 doubles.
 */
enum TsStatus ts_resample(const struct TsVolume *vol,
                          const double *spacing,
                          bool nearest,
                          struct TsVolume **out);

/**
 * Normalized 224×224 coronal MIP of a PET volume, u-fastest.
 *
 * # Safety
 * `pet` must come from this library; `pixels` must hold `len` doubles.
 */
enum TsStatus ts_mip(const struct TsVolume *pet, double *pixels, size_t len);

/**
 * Load discriminator weights from their JSON manifest.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum TsStatus ts_model_load(const char *path, struct TsModel **out);

/**
 * # Safety
 * `model` must be null or come from this library and not be used afterwards.
 */
void ts_model_free(struct TsModel *model);

/**
 * Classify a PET volume. Writes the PSMA probability and
 * `TS_TRACER_FDG` / `TS_TRACER_PSMA`.
 *
 * # Safety
 * Handles must come from this library; outputs must be writable.
 */
enum TsStatus ts_predict_tracer(const struct TsModel *model,
                                const struct TsVolume *pet,
                                double *probability,
                                int32_t *tracer);

/**
 * Score voxels equal to `label` in `pred` against `gt`. `connectivity` is
 * 6, 18 or 26.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum TsStatus ts_evaluate(const struct TsVolume *pred,
                          const struct TsVolume *gt,
                          uint32_t label,
                          uint8_t connectivity,
                          struct TsCaseMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRACERSEG_H */

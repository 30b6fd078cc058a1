#ifndef SFA_FFI_H
#define SFA_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SfaStatus {
  SFA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SFA_STATUS_NULL_POINTER = 1,
  /**
   * An argument was out of range or inconsistent (sizes, UTF-8 paths).
   */
  SFA_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  SFA_STATUS_IO = 3,
  /**
   * A file was readable but malformed.
   */
  SFA_STATUS_FORMAT = 4,
  /**
   * The cube's band count differs from the model's.
   */
  SFA_STATUS_BAND_MISMATCH = 5,
  /**
   * Numerical failure or another library error.
   */
  SFA_STATUS_FAILED = 6,
  /**
   * A panic was caught at the boundary.
   */
  SFA_STATUS_INTERNAL = 7,
} SfaStatus;

/**
 * Opaque hyperspectral cube.
 */
typedef struct SfaCube SfaCube;

/**
 * Opaque owned list of detections.
 */
typedef struct SfaDetections SfaDetections;

/**
 * Opaque trained model.
 */
typedef struct SfaModel SfaModel;

/**
 * One detection; `x, y` is the top-left corner in pixels.
 */
typedef struct SfaDetection {
  uint64_t image_id;
  float x;
  float y;
  float w;
  float h;
  float score;
  uint32_t category_id;
} SfaDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sfa_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next library call on the same thread.
 */
const char *sfa_last_error(void);

/**
 * Builds a cube from band-sequential values (`bands` planes of
 * `height * width`, row-major).
 */
enum SfaStatus sfa_cube_new(size_t width,
                            size_t height,
                            size_t bands,
                            const float *values,
                            size_t len,
                            struct SfaCube **out);

enum SfaStatus sfa_cube_read(const char *path, struct SfaCube **out);

enum SfaStatus sfa_cube_write(const struct SfaCube *cube, const char *path);

enum SfaStatus sfa_cube_dims(const struct SfaCube *cube,
                             size_t *width,
                             size_t *height,
                             size_t *bands);

/**
 * Borrowed band-sequential values, valid while `cube` lives. Null when
 * `cube` is null.
 */
const float *sfa_cube_values(const struct SfaCube *cube, size_t *len);

/**
 * Expands or reduces `cube` to `bands` bands into a new cube.
 */
enum SfaStatus sfa_cube_match_bands(const struct SfaCube *cube, size_t bands, struct SfaCube **out);

/**
 * Writes the bands×bands Gram matrix of the standardized cube, row-major,
 * into `buf`, which must hold at least `bands * bands` floats.
 */
enum SfaStatus sfa_cube_gram(const struct SfaCube *cube, bool normalize, float *buf, size_t len);

void sfa_cube_free(struct SfaCube *cube);

/**
 * Loads a checkpoint with default detection thresholds.
 */
enum SfaStatus sfa_model_load(const char *path, struct SfaModel **out);

enum SfaStatus sfa_model_save(const struct SfaModel *model, const char *path);

/**
 * Band count the model expects; 0 when `model` is null.
 */
size_t sfa_model_bands(const struct SfaModel *model);

/**
 * Runs detection on one cube. The cube must already have the model's band
 * count and sides divisible by 8.
 */
enum SfaStatus sfa_model_detect(const struct SfaModel *model,
                                const struct SfaCube *cube,
                                uint64_t image_id,
                                struct SfaDetections **out);

void sfa_model_free(struct SfaModel *model);

size_t sfa_detections_len(const struct SfaDetections *dets);

/**
 * Borrowed array of `sfa_detections_len` entries, valid while `dets` lives.
 */
const struct SfaDetection *sfa_detections_data(const struct SfaDetections *dets);

void sfa_detections_free(struct SfaDetections *dets);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFA_FFI_H */

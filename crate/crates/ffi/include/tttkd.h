#ifndef TTTKD_H
#define TTTKD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TttkdStatus {
  TTTKD_STATUS_OK = 0,
  TTTKD_STATUS_CONFIG = 2,
  TTTKD_STATUS_NUMERIC = 3,
  TTTKD_STATUS_IO = 4,
  TTTKD_STATUS_NULL_POINTER = 5,
  TTTKD_STATUS_BUFFER_TOO_SMALL = 6,
  TTTKD_STATUS_PANIC = 7,
} TttkdStatus;

/**
 * Opaque model handle.
 */
typedef struct TttkdModel TttkdModel;

/**
 * Opaque scene handle.
 */
typedef struct TttkdScene TttkdScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length, 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t tttkd_last_error(char *buf, size_t len);

/**
 * Generate a default indoor scene.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum TttkdStatus tttkd_scene_generate(uint64_t seed, struct TttkdScene **out);

/**
 * Load a `.ttts` scene file.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid handle slot.
 */
enum TttkdStatus tttkd_scene_load(const char *path, struct TttkdScene **out);

/**
 * Write a scene to a `.ttts` file.
 *
 * # Safety
 * `scene` must be a live handle, `path` a NUL-terminated string.
 */
enum TttkdStatus tttkd_scene_save(const struct TttkdScene *scene, const char *path);

/**
 * Point count of a scene, 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or a live handle.
 */
size_t tttkd_scene_num_points(const struct TttkdScene *scene);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void tttkd_scene_free(struct TttkdScene *scene);

/**
 * Load a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` a valid handle slot.
 */
enum TttkdStatus tttkd_model_load(const char *path, struct TttkdModel **out);

/**
 * Number of output classes, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t tttkd_model_num_classes(const struct TttkdModel *model);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void tttkd_model_free(struct TttkdModel *model);

/**
 * Rotation-ensembled prediction without adaptation. Writes one class id per
 * point into `out` (capacity `len`).
 *
 * # Safety
 * Handles must be live; `out` must point to `len` writable `u32`s.
 */
enum TttkdStatus tttkd_predict(const struct TttkdModel *model,
                               const struct TttkdScene *scene,
                               size_t rotations,
                               uint32_t *out,
                               size_t len);

/**
 * Offline test-time training on one scene, then prediction. `teacher_dir`
 * holds `scene_0000_imgNN.tttf` caches for this scene; null uses the synthetic
 * teacher with default settings. The model handle is left unchanged.
 *
 * # Safety
 * Handles must be live; `teacher_dir` null or NUL-terminated; `out` must point
 * to `len` writable `u32`s.
 */
enum TttkdStatus tttkd_ttt_offline(const struct TttkdModel *model,
                                   const struct TttkdScene *scene,
                                   const char *teacher_dir,
                                   size_t steps,
                                   float lr,
                                   size_t rotations,
                                   uint64_t seed,
                                   uint32_t *out,
                                   size_t len);

/**
 * mIoU over all `classes` of `n` predicted and ground-truth ids.
 *
 * # Safety
 * `pred` and `gt` must point to `n` readable `u32`s, `out` to one `f64`.
 */
enum TttkdStatus tttkd_miou(const uint32_t *pred,
                            const uint32_t *gt,
                            size_t n,
                            size_t classes,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TTTKD_H */

#ifndef UNEPT_H
#define UNEPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

enum UneptStatus
#ifdef __cplusplus
  : int32_t
#endif // __cplusplus
 {
  UNEPT_STATUS_OK = 0,
  UNEPT_STATUS_NULL_POINTER = -1,
  UNEPT_STATUS_INVALID_ARGUMENT = -2,
  UNEPT_STATUS_IO = -3,
  UNEPT_STATUS_FORMAT = -4,
  UNEPT_STATUS_SHAPE = -5,
  UNEPT_STATUS_NUMERIC = -6,
  UNEPT_STATUS_PANIC = -255,
};
#ifndef __cplusplus
typedef int32_t UneptStatus;
#endif // __cplusplus

/**
 * Trained network loaded from a checkpoint.
 */
typedef struct UneptModel UneptModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null after a success. The
 * pointer stays valid until the next call on the same thread.
 */
const char *unept_last_error_message(void);

/**
 * Loads a network. `config_path` may be null for the default configuration;
 * it must describe the network the checkpoint was trained with.
 *
 * # Safety
 * Paths are nul-terminated strings; `out` is writable.
 */
UneptStatus unept_model_load(const char *config_path,
                             const char *checkpoint_path,
                             struct UneptModel **out);

/**
 * Releases a network; null is accepted.
 *
 * # Safety
 * `model` comes from [`unept_model_load`] and is not used afterwards.
 */
void unept_model_free(struct UneptModel *model);

/**
 * Number of classes the network predicts.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
UneptStatus unept_model_classes(const struct UneptModel *model, size_t *out);

/**
 * Segments an interleaved 8-bit RGB image of `height × width` pixels, both
 * multiples of 32, writing one class id per pixel in row-major order. With
 * `refine` the boundary and direction heads correct the labels.
 *
 * # Safety
 * `rgb` holds `3·height·width` bytes and `labels` holds `labels_len` bytes.
 */
UneptStatus unept_model_segment(const struct UneptModel *model,
                                const uint8_t *rgb,
                                size_t height,
                                size_t width,
                                bool refine,
                                uint8_t *labels,
                                size_t labels_len);

/**
 * Distance from each pixel to the nearest labelled pixel of another class;
 * infinity where no such pixel exists. Label 255 is ignored.
 *
 * # Safety
 * `labels` and `distances` each hold `height·width` elements.
 */
UneptStatus unept_distance_transform(const uint8_t *labels,
                                     size_t height,
                                     size_t width,
                                     double *distances);

/**
 * Mean IoU over the classes present in `truth` and pixel accuracy of `pred`
 * against `truth`; pixels labelled 255 in `truth` are skipped.
 *
 * # Safety
 * `pred` and `truth` hold `len` bytes; `miou` and `pix_acc` are writable.
 */
UneptStatus unept_segmentation_metrics(const uint8_t *pred,
                                       const uint8_t *truth,
                                       size_t len,
                                       size_t classes,
                                       double *miou,
                                       double *pix_acc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UNEPT_H */

#ifndef SPLATWORLD_H
#define SPLATWORLD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_NULL_POINTER = 1,
  SW_STATUS_INVALID_ARGUMENT = 2,
  SW_STATUS_SHAPE_MISMATCH = 3,
  SW_STATUS_IO = 4,
  SW_STATUS_INTERNAL = 5,
  SW_STATUS_PANIC = 6,
} SwStatus;

/**
 * Opaque synthetic multi-view clip.
 */
typedef struct SwClip SwClip;

/**
 * Opaque set of Gaussians.
 */
typedef struct SwGaussianSet SwGaussianSet;

/**
 * One 3D Gaussian with constant velocity.
 */
typedef struct SwGaussian {
  double mean[3];
  double rotation[4];
  double scale[3];
  double opacity;
  double color[3];
  double velocity[3];
  double source_time;
} SwGaussian;

/**
 * Pinhole camera: world-to-camera rotation `[w, x, y, z]` and translation.
 */
typedef struct SwCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  double rotation[4];
  double translation[3];
  uint32_t width;
  uint32_t height;
} SwCamera;

/**
 * Depth metrics over the masked pixels.
 */
typedef struct SwDepthMetrics {
  double rmse;
  double absrel;
  double delta1;
} SwDepthMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len` bytes, into `buf`. Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
uintptr_t sw_last_error_message(char *buf, uintptr_t len);

struct SwGaussianSet *sw_gaussians_new(void);

/**
 * # Safety
 * `set` must be null or a handle from [`sw_gaussians_new`] not yet freed.
 */
void sw_gaussians_free(struct SwGaussianSet *set);

/**
 * # Safety
 * `set` must be a live handle and `g` a valid pointer.
 */
enum SwStatus sw_gaussians_push(struct SwGaussianSet *set, const struct SwGaussian *g);

/**
 * # Safety
 * `set` must be null or a live handle.
 */
uintptr_t sw_gaussians_len(const struct SwGaussianSet *set);

/**
 * Renders `set` moved to time `time` into caller buffers of
 * `height·width·3` (`rgb`) and `height·width` (`depth`, `alpha`) doubles.
 * `depth` and `alpha` may be null.
 *
 * # Safety
 * Non-null buffers must have the stated lengths.
 */
enum SwStatus sw_render(const struct SwGaussianSet *set,
                        const struct SwCamera *camera,
                        double time,
                        double *rgb,
                        double *depth,
                        double *alpha);

/**
 * Synthesizes clip `index` of a dataset with the given seed and layout.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a new handle.
 */
enum SwStatus sw_clip_synthesize(uint64_t seed,
                                 uint32_t index,
                                 uint32_t views,
                                 uint32_t frames,
                                 uint32_t height,
                                 uint32_t width,
                                 struct SwClip **out);

/**
 * # Safety
 * `clip` must be null or a live handle.
 */
void sw_clip_free(struct SwClip *clip);

/**
 * Writes `[frames, views, height, width]` into `dims`.
 *
 * # Safety
 * `clip` must be a live handle and `dims` valid for 4 values.
 */
enum SwStatus sw_clip_dims(const struct SwClip *clip, uint32_t *dims);

/**
 * Copies the `height·width·3` image of frame `t`, view `v`.
 *
 * # Safety
 * `buf` must be valid for `len` floats.
 */
enum SwStatus sw_clip_image(const struct SwClip *clip,
                            uint32_t t,
                            uint32_t v,
                            float *buf,
                            uintptr_t len);

/**
 * Copies the `height·width` ray-distance depth of frame `t`, view `v`;
 * sky pixels are `+inf`.
 *
 * # Safety
 * `buf` must be valid for `len` floats.
 */
enum SwStatus sw_clip_depth(const struct SwClip *clip,
                            uint32_t t,
                            uint32_t v,
                            float *buf,
                            uintptr_t len);

/**
 * PSNR in dB of two images in `[0, 1]`.
 *
 * # Safety
 * `x` and `y` must be valid for `n` floats, `out` for one double.
 */
enum SwStatus sw_metric_psnr(const float *x, const float *y, uintptr_t n, double *out);

/**
 * Depth RMSE, AbsRel and δ₁ over pixels whose `mask` byte is nonzero and
 * whose ground truth is finite and positive.
 *
 * # Safety
 * `d`, `d_hat` and `mask` must be valid for `n` elements, `out` for one struct.
 */
enum SwStatus sw_metric_depth(const float *d,
                              const float *d_hat,
                              const uint8_t *mask,
                              uintptr_t n,
                              struct SwDepthMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATWORLD_H */

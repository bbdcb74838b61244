#ifndef MMDN_H
#define MMDN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values match the CLI exit codes where the
 * classes overlap.
 */
typedef enum MmdnStatus {
  MMDN_STATUS_OK = 0,
  /**
   * Invalid configuration value.
   */
  MMDN_STATUS_CONFIG = 2,
  /**
   * File could not be read or written.
   */
  MMDN_STATUS_IO = 3,
  /**
   * Input violated a documented precondition, including shape mismatches.
   */
  MMDN_STATUS_CONTRACT = 4,
  /**
   * A required pointer was NULL.
   */
  MMDN_STATUS_NULL_POINTER = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  MMDN_STATUS_PANIC = 7,
} MmdnStatus;

typedef enum MmdnNormalization {
  MMDN_NORMALIZATION_INTER_PUPIL = 0,
  MMDN_NORMALIZATION_INTER_OCULAR = 1,
  MMDN_NORMALIZATION_FACE_SIZE = 2,
} MmdnNormalization;

/**
 * Opaque network handle.
 */
typedef struct MmdnNetwork MmdnNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *mmdn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmdn_version(void);

/**
 * Builds a freshly initialized network. `config_toml` is a run config
 * document (only its `[network]` table is used) or NULL for defaults.
 *
 * # Safety
 * `config_toml` is NULL or a NUL-terminated string; `out` is writable.
 */
enum MmdnStatus mmdn_network_new(const char *config_toml, uint64_t seed, struct MmdnNetwork **out);

/**
 * Loads a checkpoint written for the network described by `config_toml`.
 *
 * # Safety
 * `config_toml` is NULL or NUL-terminated; `path` is NUL-terminated; `out`
 * is writable.
 */
enum MmdnStatus mmdn_network_load(const char *config_toml,
                                  const char *path,
                                  struct MmdnNetwork **out);

/**
 * # Safety
 * `net` is a live handle; `path` is NUL-terminated.
 */
enum MmdnStatus mmdn_network_save(const struct MmdnNetwork *net, const char *path);

/**
 * Releases a handle; NULL is ignored.
 *
 * # Safety
 * `net` is NULL or a handle not yet freed.
 */
void mmdn_network_free(struct MmdnNetwork *net);

/**
 * Side of the square input image in pixels, 0 for NULL.
 *
 * # Safety
 * `net` is NULL or a live handle.
 */
size_t mmdn_network_input_size(const struct MmdnNetwork *net);

/**
 * # Safety
 * `net` is NULL or a live handle.
 */
size_t mmdn_network_parameter_count(const struct MmdnNetwork *net);

/**
 * Height, width and channel count of [`mmdn_network_predict`] output.
 *
 * # Safety
 * `net` is a live handle; the three outputs are writable.
 */
enum MmdnStatus mmdn_network_output_shape(const struct MmdnNetwork *net,
                                          size_t *height,
                                          size_t *width,
                                          size_t *channels);

/**
 * Runs the network on an `input × input × 3` image with values in `[0, 1]`
 * and writes the `H × W × C` heatmaps to `out`.
 *
 * # Safety
 * `image` holds `image_len` readable doubles; `out` holds `out_len`
 * writable doubles.
 */
enum MmdnStatus mmdn_network_predict(const struct MmdnNetwork *net,
                                     const double *image,
                                     size_t image_len,
                                     double *out,
                                     size_t out_len);

/**
 * Gaussian landmark heatmap centered on `(x, y)`.
 *
 * # Safety
 * `out` holds `width * height` writable doubles.
 */
enum MmdnStatus mmdn_encode_landmark(double x,
                                     double y,
                                     double sigma,
                                     size_t width,
                                     size_t height,
                                     double *out);

/**
 * Pixel of the maximum value, first in row-major order on ties.
 *
 * # Safety
 * `values` holds `width * height` readable doubles; `x` and `y` are writable.
 */
enum MmdnStatus mmdn_decode_argmax(const double *values,
                                   size_t width,
                                   size_t height,
                                   size_t *x,
                                   size_t *y);

/**
 * Argmax of `landmark` refined by the windowed search against `boundary`.
 * Writes both the argmax and the searched pixel.
 *
 * # Safety
 * `landmark` and `boundary` each hold `width * height` readable doubles;
 * `argmax_xy` and `search_xy` each hold 2 writable values.
 */
enum MmdnStatus mmdn_search(const double *landmark,
                            const double *boundary,
                            size_t width,
                            size_t height,
                            size_t window,
                            double sigma3,
                            size_t *argmax_xy,
                            size_t *search_xy);

/**
 * Normalized mean error of `n_points` predicted points. `bbox` is
 * `x, y, w, h` and is required for [`MmdnNormalization::FaceSize`], NULL
 * otherwise allowed.
 *
 * # Safety
 * `pred` and `gt` hold `2 * n_points` readable doubles; `bbox` is NULL or
 * holds 4; `out` is writable.
 */
enum MmdnStatus mmdn_nme(const double *pred,
                         const double *gt,
                         size_t n_points,
                         enum MmdnNormalization normalization,
                         const double *bbox,
                         double *out);

/**
 * Square root of a `d × d` symmetric positive definite matrix by `k`
 * Newton–Schulz iterations. Sets `degenerate` when the trace was too small
 * to normalize.
 *
 * # Safety
 * `sigma` holds `d * d` readable doubles, `out` holds `d * d` writable
 * doubles, `degenerate` is NULL or writable.
 */
enum MmdnStatus mmdn_sqrtm(const double *sigma, size_t d, size_t k, double *out, bool *degenerate);

/**
 * Jensen–Shannon divergence between two nonnegative maps of `n` values,
 * each normalized to sum to one first.
 *
 * # Safety
 * `p` and `q` hold `n` readable doubles; `out` is writable.
 */
enum MmdnStatus mmdn_js_divergence(const double *p, const double *q, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMDN_H */

#ifndef LPQSM_H
#define LPQSM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum LpqsmStatus {
  LPQSM_STATUS_OK = 0,
  LPQSM_STATUS_NULL_POINTER = 1,
  LPQSM_STATUS_INVALID_ARGUMENT = 2,
  LPQSM_STATUS_GRID_MISMATCH = 3,
  LPQSM_STATUS_IO = 4,
  LPQSM_STATUS_FORMAT = 5,
  LPQSM_STATUS_NUMERICAL = 6,
  LPQSM_STATUS_PANIC = 7,
} LpqsmStatus;

/**
 * A dipole forward operator for one grid and field direction.
 */
typedef struct LpqsmDipole LpqsmDipole;

/**
 * A trained proximal network.
 */
typedef struct LpqsmProx LpqsmProx;

/**
 * A real-valued volume on a grid.
 */
typedef struct LpqsmVolume LpqsmVolume;

/**
 * Image quality of a reconstruction against ground truth.
 */
typedef struct LpqsmMetrics {
  double nrmse_percent;
  /**
   * `+inf` for identical volumes.
   */
  double psnr_db;
  double hfen_percent;
  double ssim;
  size_t mask_voxels;
} LpqsmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *lpqsm_last_error(void);

/**
 * Creates a volume of `dims[0]*dims[1]*dims[2]` samples, x fastest.
 * `data` may be null for zeros.
 *
 * # Safety
 * `dims` and `voxel_size` point to 3 values; `data`, if non-null, to the
 * full sample count.
 */
enum LpqsmStatus lpqsm_volume_new(const size_t *dims,
                                  const double *voxel_size,
                                  const double *data,
                                  struct LpqsmVolume **out);

/**
 * # Safety
 * `v` is null or a handle not yet freed.
 */
void lpqsm_volume_free(struct LpqsmVolume *v);

/**
 * Writes the grid shape and voxel size (mm); either output may be null.
 *
 * # Safety
 * Non-null outputs point to 3 writable values.
 */
enum LpqsmStatus lpqsm_volume_dims(const struct LpqsmVolume *v, size_t *dims, double *voxel_size);

/**
 * Copies the samples into `out`, which must hold exactly `len` values.
 *
 * # Safety
 * `out` points to `len` writable doubles.
 */
enum LpqsmStatus lpqsm_volume_copy_data(const struct LpqsmVolume *v, double *out, size_t len);

/**
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum LpqsmStatus lpqsm_qvol_read(const char *path, struct LpqsmVolume **out);

/**
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum LpqsmStatus lpqsm_qvol_write(const struct LpqsmVolume *v, const char *path);

/**
 * Dipole operator for B0 along `h` (unit length within 1e-6).
 *
 * # Safety
 * `dims`, `voxel_size` and `h` point to 3 values each.
 */
enum LpqsmStatus lpqsm_dipole_new(const size_t *dims,
                                  const double *voxel_size,
                                  const double *h,
                                  struct LpqsmDipole **out);

/**
 * # Safety
 * `op` is null or a handle not yet freed.
 */
void lpqsm_dipole_free(struct LpqsmDipole *op);

/**
 * Simulated local field of `x`.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum LpqsmStatus lpqsm_dipole_forward(const struct LpqsmDipole *op,
                                      const struct LpqsmVolume *x,
                                      struct LpqsmVolume **out);

/**
 * Thresholded k-space division.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum LpqsmStatus lpqsm_tkd(const struct LpqsmVolume *y,
                           const struct LpqsmDipole *op,
                           double threshold,
                           struct LpqsmVolume **out);

/**
 * Multi-orientation least squares over `count` phase/operator pairs.
 *
 * # Safety
 * `ys` and `ops` point to `count` live handles each.
 */
enum LpqsmStatus lpqsm_cosmos(const struct LpqsmVolume *const *ys,
                              const struct LpqsmDipole *const *ops,
                              size_t count,
                              double threshold,
                              struct LpqsmVolume **out);

/**
 * Loads a trained network weight file.
 *
 * # Safety
 * `path` is a NUL-terminated string.
 */
enum LpqsmStatus lpqsm_prox_load(const char *path, struct LpqsmProx **out);

/**
 * # Safety
 * `prox` is null or a handle not yet freed.
 */
void lpqsm_prox_free(struct LpqsmProx *prox);

/**
 * Learned proximal gradient descent from zero over `count` inputs.
 *
 * # Safety
 * `ys` and `ops` point to `count` live handles each; `prox` is live.
 */
enum LpqsmStatus lpqsm_lpcnn_reconstruct(const struct LpqsmVolume *const *ys,
                                         const struct LpqsmDipole *const *ops,
                                         size_t count,
                                         const struct LpqsmProx *prox,
                                         double alpha,
                                         size_t iterations,
                                         struct LpqsmVolume **out);

/**
 * NRMSE, PSNR, HFEN and SSIM of `pred` against `gt`; `mask` may be null
 * for the whole grid, otherwise its non-zero samples are used.
 *
 * # Safety
 * Handles are live; `out` is writable.
 */
enum LpqsmStatus lpqsm_metrics(const struct LpqsmVolume *pred,
                               const struct LpqsmVolume *gt,
                               const struct LpqsmVolume *mask,
                               struct LpqsmMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPQSM_H */

#ifndef DDEQ_H
#define DDEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdeqStatus {
  DDEQ_STATUS_OK = 0,
  DDEQ_STATUS_NULL_POINTER = 1,
  DDEQ_STATUS_INVALID_ARGUMENT = 2,
  DDEQ_STATUS_SHAPE = 3,
  DDEQ_STATUS_IO = 4,
  DDEQ_STATUS_CONFIG = 5,
  DDEQ_STATUS_NUMERIC = 6,
  DDEQ_STATUS_BUFFER_TOO_SMALL = 7,
  DDEQ_STATUS_PANIC = 8,
} DdeqStatus;

/**
 * Kernel selector for [`ddeq_mmd_sq`].
 */
typedef enum DdeqKernel {
  DDEQ_KERNEL_RIESZ = 0,
  DDEQ_KERNEL_GAUSSIAN = 1,
} DdeqKernel;

/**
 * Opaque model handle.
 */
typedef struct DdeqModel DdeqModel;

/**
 * Inner-loop and latent settings for inference.
 */
typedef struct DdeqSolveOptions {
  size_t iterations;
  double step_size;
  double step_decay;
  /**
   * Latent particle count for classification.
   */
  size_t latent_particles;
  /**
   * Free particles added for completion, as a fraction of the input count.
   */
  double free_fraction;
  uint64_t seed;
} DdeqSolveOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ddeq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ddeq_version(void);

/**
 * Defaults used by the command-line tools.
 */
struct DdeqSolveOptions ddeq_solve_options_default(void);

/**
 * Squared MMD between two uniform clouds.
 *
 * # Safety
 * `x` must point to `n * dim` doubles and `y` to `m * dim` doubles; `out`
 * must be writable.
 */
enum DdeqStatus ddeq_mmd_sq(const double *x,
                            size_t n,
                            const double *y,
                            size_t m,
                            size_t dim,
                            enum DdeqKernel kernel,
                            double sigma,
                            double *out);

/**
 * Exact 2-Wasserstein distance between two uniform clouds.
 *
 * # Safety
 * As for [`ddeq_mmd_sq`].
 */
enum DdeqStatus ddeq_w2_distance(const double *x,
                                 size_t n,
                                 const double *y,
                                 size_t m,
                                 size_t dim,
                                 double *out);

/**
 * Freshly initialized desk-size model. `num_classes > 0` adds a
 * classification head; `coupling` adds the completion coupling layer.
 *
 * # Safety
 * `out` must be writable.
 */
enum DdeqStatus ddeq_model_new(size_t data_dim,
                               size_t num_classes,
                               bool coupling,
                               uint64_t seed,
                               struct DdeqModel **out);

/**
 * Loads a checkpoint written by the training commands.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum DdeqStatus ddeq_model_load(const char *path, struct DdeqModel **out);

/**
 * Writes the model as a checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DdeqStatus ddeq_model_save(const struct DdeqModel *model, const char *path);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ddeq_model_free(struct DdeqModel *model);

/**
 * Input dimension of the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t ddeq_model_data_dim(const struct DdeqModel *model);

/**
 * Number of classes of the head (0 without one), or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t ddeq_model_num_classes(const struct DdeqModel *model);

/**
 * Class logits for one cloud. `logits` must hold `logits_len` doubles, at
 * least the model's class count. `opts` may be NULL for the defaults.
 *
 * # Safety
 * `model` must be a live handle, `x` must point to `m * dim` doubles and
 * `logits` to `logits_len` writable doubles.
 */
enum DdeqStatus ddeq_classify(const struct DdeqModel *model,
                              const double *x,
                              size_t m,
                              size_t dim,
                              const struct DdeqSolveOptions *opts,
                              double *logits,
                              size_t logits_len);

/**
 * Completes one partial cloud. The prediction starts with the `m` input
 * particles followed by the free ones; `*out_rows` receives the row count.
 * When `out` is NULL or too small, only `*out_rows` is set and
 * `DDEQ_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `model` must be a live handle, `x` must point to `m * dim` doubles, `out`
 * to `out_capacity` writable doubles (or be NULL), and `out_rows` writable.
 */
enum DdeqStatus ddeq_complete(const struct DdeqModel *model,
                              const double *x,
                              size_t m,
                              size_t dim,
                              const struct DdeqSolveOptions *opts,
                              double *out,
                              size_t out_capacity,
                              size_t *out_rows);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDEQ_H */

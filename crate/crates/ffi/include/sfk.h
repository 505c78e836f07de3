#ifndef SFK_H
#define SFK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum SfkStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  Io = 3,
  Numeric = 4,
  ParseError = 5,
  BufferTooSmall = 6,
} SfkStatus;

/**
 * Opaque snapshot dataset handle.
 */
typedef struct SfkDataset SfkDataset;

/**
 * Opaque trained-model handle.
 */
typedef struct SfkModel SfkModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sfk_version(void);

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sfk_last_error_message(void);

/**
 * Generate a synthetic linear snapshot dataset. `knockouts` may be NULL
 * when `n_knockouts` is 0. On success `*out` owns the new handle.
 *
 * # Safety
 * `out` must be a valid pointer; `knockouts` must point to `n_knockouts`
 * readable elements when non-NULL.
 */
enum SfkStatus sfk_dataset_generate(uintptr_t d,
                                    double sparsity,
                                    uintptr_t timepoints,
                                    uintptr_t samples,
                                    double sigma,
                                    double horizon,
                                    double dt,
                                    bool damping,
                                    const uintptr_t *knockouts,
                                    uintptr_t n_knockouts,
                                    uint64_t seed,
                                    struct SfkDataset **out);

/**
 * Read a dataset directory written by the CLI or [`sfk_dataset_write`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum SfkStatus sfk_dataset_read(const char *path, struct SfkDataset **out);

/**
 * Write a dataset to a directory.
 *
 * # Safety
 * `ds` must be a live handle from this library; `path` a valid string.
 */
enum SfkStatus sfk_dataset_write(const struct SfkDataset *ds, const char *path);

/**
 * Number of variables in the dataset; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
uintptr_t sfk_dataset_dim(const struct SfkDataset *ds);

/**
 * Number of conditions in the dataset; 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live handle.
 */
uintptr_t sfk_dataset_conditions(const struct SfkDataset *ds);

/**
 * Copy the ground-truth graph (row-major d*d) into `out_buf`. Fails with
 * `InvalidArgument` when the dataset has no ground truth.
 *
 * # Safety
 * `ds` must be a live handle; `out_buf` must hold `len` writable elements.
 */
enum SfkStatus sfk_dataset_graph(const struct SfkDataset *ds, double *out_buf, uintptr_t len);

/**
 * Free a dataset handle (NULL is a no-op).
 *
 * # Safety
 * `ds` must be NULL or a pointer previously returned by this library and
 * not yet freed.
 */
void sfk_dataset_free(struct SfkDataset *ds);

/**
 * Train on a dataset. `config_text` uses the CLI config syntax (a `[train]`
 * section of key=value lines) and may be NULL for defaults.
 *
 * # Safety
 * `ds` must be a live handle; `out` a valid pointer; `config_text` NULL or
 * a valid NUL-terminated string.
 */
enum SfkStatus sfk_train(const struct SfkDataset *ds,
                         const char *config_text,
                         uint64_t seed,
                         struct SfkModel **out);

/**
 * Number of variables the model was trained on; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
uintptr_t sfk_model_dim(const struct SfkModel *model);

/**
 * Copy the inferred graph (row-major d*d, entry (j,i) = influence of i on
 * j) into `out_buf`.
 *
 * # Safety
 * `model` must be a live handle; `out_buf` must hold `len` elements.
 */
enum SfkStatus sfk_model_graph(const struct SfkModel *model, double *out_buf, uintptr_t len);

/**
 * Integrate the learned deterministic dynamics over one unit segment.
 * `x0`/`x_out` are row-major `n x d`; `knockout < 0` means observational.
 *
 * # Safety
 * `model` must be a live handle; `x0` must hold `n*d` readable and `x_out`
 * `n*d` writable elements.
 */
enum SfkStatus sfk_model_rollout(const struct SfkModel *model,
                                 const double *x0,
                                 uintptr_t n,
                                 uintptr_t segment,
                                 int64_t knockout,
                                 uintptr_t steps,
                                 double *x_out);

/**
 * Save the model as a versioned JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid string.
 */
enum SfkStatus sfk_model_save(const struct SfkModel *model, const char *path);

/**
 * Load a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a valid string, `out` a valid pointer.
 */
enum SfkStatus sfk_model_load(const char *path, struct SfkModel **out);

/**
 * Free a model handle (NULL is a no-op).
 *
 * # Safety
 * `model` must be NULL or a pointer previously returned by this library
 * and not yet freed.
 */
void sfk_model_free(struct SfkModel *model);

/**
 * AUROC and AP of predicted edge scores against a binarized ground truth,
 * both row-major d*d, diagonal excluded.
 *
 * # Safety
 * `predicted` and `truth` must hold `d*d` readable elements; the output
 * pointers must be valid.
 */
enum SfkStatus sfk_structure_scores(const double *predicted,
                                    const double *truth,
                                    uintptr_t d,
                                    double *out_auroc,
                                    double *out_ap);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SFK_H */

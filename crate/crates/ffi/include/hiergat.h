#ifndef HIERGAT_H
#define HIERGAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum HgStatus {
  HG_STATUS_OK = 0,
  HG_STATUS_NULL_POINTER = 1,
  HG_STATUS_INVALID_ARGUMENT = 2,
  HG_STATUS_PARSE = 3,
  HG_STATUS_IO = 4,
  HG_STATUS_SHAPE = 5,
  HG_STATUS_PANIC = 6,
} HgStatus;

/**
 * Opaque class hierarchy.
 */
typedef struct HgHierarchy HgHierarchy;

/**
 * Opaque trained model.
 */
typedef struct HgModel HgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty if none). The
 * pointer stays valid until the next failing call on this thread.
 */
const char *hg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hg_version(void);

/**
 * Parses a class tree given as `parent<TAB>child` lines (a bare name on a
 * line declares a top-level class).
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HgStatus hg_hierarchy_parse(const char *text, struct HgHierarchy **out);

/**
 * The built-in seven-class cell population tree.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum HgStatus hg_hierarchy_cell_populations(struct HgHierarchy **out);

/**
 * Releases a hierarchy. Null is ignored.
 *
 * # Safety
 * `h` must come from this library and not be used afterwards.
 */
void hg_hierarchy_free(struct HgHierarchy *h);

/**
 * Number of classes.
 *
 * # Safety
 * `h` must be a live handle or null.
 */
size_t hg_hierarchy_len(const struct HgHierarchy *h);

/**
 * Looks up a class id by name.
 *
 * # Safety
 * `h` must be a live handle, `name` NUL-terminated, `out` valid.
 */
enum HgStatus hg_hierarchy_class_id(const struct HgHierarchy *h, const char *name, size_t *out);

/**
 * Max-constraint scores of `n_rows` row-major score vectors of the
 * hierarchy's width.
 *
 * # Safety
 * `raw` and `out` must hold `n_rows * hg_hierarchy_len(h)` values.
 */
enum HgStatus hg_mcm(const struct HgHierarchy *h, const double *raw, size_t n_rows, double *out);

/**
 * Weighted max-constraint loss of one sample. `y` is the ancestor-closed
 * 0/1 target; `weights` may be null for unit weights.
 *
 * # Safety
 * `raw`, `y` and non-null `weights` must hold `hg_hierarchy_len(h)` values.
 */
enum HgStatus hg_mcloss(const struct HgHierarchy *h,
                        const double *raw,
                        const double *y,
                        const double *weights,
                        double *out);

/**
 * Counts hierarchy violations over `n_rows` row-major score vectors.
 *
 * # Safety
 * `scores` must hold `n_rows * hg_hierarchy_len(h)` values.
 */
enum HgStatus hg_check_coherence(const struct HgHierarchy *h,
                                 const double *scores,
                                 size_t n_rows,
                                 size_t *out_count);

/**
 * Exact k-NN lists over `n` row-major points of dimension `m`. `out`
 * receives `n * k` indices; when `k >= n` only `n * (n - 1)` are written
 * and `out_k` reports the effective `k`.
 *
 * # Safety
 * `features` must hold `n * m` values, `out` room for `n * k` indices.
 */
enum HgStatus hg_knn_build(const double *features,
                           size_t n,
                           size_t m,
                           size_t k,
                           uint32_t *out,
                           size_t *out_k);

/**
 * Loads a trained run directory (`config.json` + `checkpoint.hcgat`).
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` valid.
 */
enum HgStatus hg_model_load(const char *dir, struct HgModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hg_model_load`] and not be used afterwards.
 */
void hg_model_free(struct HgModel *model);

/**
 * Number of input features the model expects.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t hg_model_num_features(const struct HgModel *model);

/**
 * Number of classes the model scores.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t hg_model_num_classes(const struct HgModel *model);

/**
 * Scores `n` rows of raw (unnormalized) features. The rows form their own
 * k-NN graph. `out_scores` receives `n * classes` decision scores
 * (constrained for hierarchical models).
 *
 * # Safety
 * `features` must hold `n * num_features` values, `out_scores` room for
 * `n * num_classes`.
 */
enum HgStatus hg_model_scores(const struct HgModel *model,
                              const double *features,
                              size_t n,
                              double *out_scores);

/**
 * Most-specific predicted class id of each of `n` rows.
 *
 * # Safety
 * As [`hg_model_scores`]; `out_class` must have room for `n` ids.
 */
enum HgStatus hg_model_predict(const struct HgModel *model,
                               const double *features,
                               size_t n,
                               size_t *out_class);

/**
 * Clears the thread's last error message.
 */
void hg_clear_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HIERGAT_H */

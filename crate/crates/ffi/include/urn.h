#ifndef URN_H
#define URN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UrnStatus {
  URN_STATUS_OK = 0,
  URN_STATUS_NULL_POINTER = 1,
  URN_STATUS_INVALID_ARGUMENT = 2,
  URN_STATUS_SHAPE = 3,
  URN_STATUS_IO = 4,
  URN_STATUS_CHECKPOINT = 5,
  URN_STATUS_SINGLE_CLASS = 6,
  URN_STATUS_PANIC = 7,
  URN_STATUS_OTHER = 8,
} UrnStatus;

/**
 * Opaque model handle.
 */
typedef struct UrnHandle UrnHandle;

typedef struct UrnConfusion {
  uint64_t tp;
  uint64_t tn;
  uint64_t fp;
  uint64_t fn_;
} UrnConfusion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *urn_last_error(void);

/**
 * Loads a trained model from a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be valid for one write.
 */
enum UrnStatus urn_model_load(const char *dir, struct UrnHandle **out);

/**
 * Builds an untrained model from a network config in JSON (fields as in
 * `network.json`; missing fields take the desk-scale defaults).
 *
 * # Safety
 * `config_json` must be NUL-terminated; `out` must be valid for one write.
 */
enum UrnStatus urn_model_new(const char *config_json, uint64_t seed, struct UrnHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from `urn_model_load`/`urn_model_new` and not be used
 * afterwards.
 */
void urn_model_free(struct UrnHandle *handle);

/**
 * Input height and width the model expects.
 *
 * # Safety
 * `handle` must be live; `h` and `w` valid for one write each.
 */
enum UrnStatus urn_model_input_size(const struct UrnHandle *handle, size_t *h, size_t *w);

/**
 * Coarse mask, uncertainty and refined mask for one image of the model's
 * input size. Any output pointer may be null to skip it.
 *
 * # Safety
 * `image` must hold `3·h·w` doubles; non-null outputs `h·w` each.
 */
enum UrnStatus urn_model_infer(const struct UrnHandle *handle,
                               const double *image,
                               size_t h,
                               size_t w,
                               uint64_t seed,
                               double *y_m,
                               double *y_u,
                               double *y_v);

/**
 * Pixelwise mean and uncertainty of `n` stacked maps of `len` pixels.
 *
 * # Safety
 * `samples` must hold `n·len` doubles; `mean` and `unc` `len` each.
 */
enum UrnStatus urn_summarize(const double *samples,
                             size_t n,
                             size_t len,
                             double *mean,
                             double *unc);

/**
 * Confusion counts of `pred ≥ thr` against the binary `gt`.
 *
 * # Safety
 * `pred` and `gt` must hold `len` doubles; `out` valid for one write.
 */
enum UrnStatus urn_confusion(const double *pred,
                             const double *gt,
                             size_t len,
                             double thr,
                             struct UrnConfusion *out);

double urn_f1(struct UrnConfusion c);

double urn_mcc(struct UrnConfusion c);

/**
 * Rank AUC of `scores` against 0/1 `labels`; `URN_STATUS_SINGLE_CLASS`
 * when only one class is present.
 *
 * # Safety
 * `scores` and `labels` must hold `n` entries; `out` valid for one write.
 */
enum UrnStatus urn_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Dense normalized propagation operator (`N × N`, `N = rows·cols`) of the
 * local uncertainty-guided graph over node uncertainties `u`.
 *
 * # Safety
 * `u` must hold `N` doubles and `out` `N·N`.
 */
enum UrnStatus urn_uggc_operator(const double *u, size_t rows, size_t cols, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* URN_H */

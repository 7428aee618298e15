/* C ABI for the fewseg few-shot segmentation library. */

#ifndef FEWSEG_H
#define FEWSEG_H

/* Generated by cbindgen from fewseg-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Call outcome. Everything except `Ok` leaves a message retrievable via
// `fewseg_last_error_message`.
typedef enum FewsegStatus {
  FEWSEG_STATUS_OK = 0,
  FEWSEG_STATUS_NULL_ARGUMENT = 1,
  FEWSEG_STATUS_INVALID_ARGUMENT = 2,
  FEWSEG_STATUS_IO = 3,
  FEWSEG_STATUS_DECODE = 4,
  FEWSEG_STATUS_SHAPE_MISMATCH = 5,
  FEWSEG_STATUS_BUFFER_TOO_SMALL = 6,
  FEWSEG_STATUS_INTERNAL = 7,
} FewsegStatus;

// Opaque handle over a loaded checkpoint.
typedef struct FewsegModel FewsegModel;

// Interleaved 8-bit RGB pixels, row-major.
typedef struct FewsegImageView {
  const uint8_t *data;
  uint32_t width;
  uint32_t height;
} FewsegImageView;

// 8-bit mask, row-major; any nonzero byte counts as foreground.
typedef struct FewsegMaskView {
  const uint8_t *data;
  uint32_t width;
  uint32_t height;
} FewsegMaskView;

// One annotated support example.
typedef struct FewsegSupport {
  struct FewsegImageView image;
  struct FewsegMaskView mask;
} FewsegSupport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copy the last error message into `buf` (NUL-terminated, truncating);
// returns the full message length in bytes, excluding the terminator.
//
// # Safety
// `buf` must point to `len` writable bytes, or be null (query mode).
size_t fewseg_last_error_message(char *buf, size_t len);

// Static library version string.
const char *fewseg_version(void);

// Load a training checkpoint as an inference model.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer; on
// `Ok` the caller owns the handle and must release it with
// `fewseg_model_free`.
enum FewsegStatus fewseg_model_load(const char *path, struct FewsegModel **out);

// Release a model handle. Null is a no-op.
//
// # Safety
// `model` must come from `fewseg_model_load` and not be used afterwards.
void fewseg_model_free(struct FewsegModel *model);

// Spatial side of the model's input and output maps (0 on null).
//
// # Safety
// `model` must be a live handle or null.
uint32_t fewseg_model_input_size(const struct FewsegModel *model);

// Segment `query` conditioned on `n_supports` annotated examples,
// writing `input_size * input_size` foreground probabilities (row-major)
// into `out_probs`.
//
// # Safety
// All pointers must be valid for the sizes implied by their views;
// `out_probs` must hold at least `out_len` floats.
enum FewsegStatus fewseg_segment(const struct FewsegModel *model,
                                 const struct FewsegSupport *supports,
                                 size_t n_supports,
                                 const struct FewsegImageView *query,
                                 float *out_probs,
                                 size_t out_len);

// Like `fewseg_segment` but thresholds at `threshold`, writing a 0/255
// mask.
//
// # Safety
// As `fewseg_segment`; `out_mask` must hold at least `out_len` bytes.
enum FewsegStatus fewseg_segment_mask(const struct FewsegModel *model,
                                      const struct FewsegSupport *supports,
                                      size_t n_supports,
                                      const struct FewsegImageView *query,
                                      float threshold,
                                      uint8_t *out_mask,
                                      size_t out_len);

// Validate the dataset rooted at `root`; the error-finding count lands
// in `out_error_count`, and the full report is written to `csv_path`
// when that is non-null.
//
// # Safety
// `root` must be NUL-terminated; `csv_path` may be null;
// `out_error_count` may be null.
enum FewsegStatus fewseg_validate_registry(const char *root,
                                           const char *csv_path,
                                           uint64_t *out_error_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEWSEG_H */

#ifndef CDDVT_H
#define CDDVT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CddvtStatus {
  CDDVT_STATUS_OK = 0,
  CDDVT_STATUS_NULL_POINTER = 1,
  CDDVT_STATUS_INVALID_ARGUMENT = 2,
  CDDVT_STATUS_SHAPE_MISMATCH = 3,
  CDDVT_STATUS_IO = 4,
  CDDVT_STATUS_PARSE = 5,
  CDDVT_STATUS_CHECKPOINT = 6,
  CDDVT_STATUS_NUMERICAL = 7,
  CDDVT_STATUS_CONFIG = 8,
  CDDVT_STATUS_BUFFER_TOO_SMALL = 9,
  CDDVT_STATUS_PANIC = 10,
} CddvtStatus;

/*
 Quantizer setting for a call.
 */
typedef enum CddvtModeKind {
  /*
   Whatever policy the checkpoint was trained with.
   */
  CDDVT_MODE_KIND_DEFAULT = 0,
  CDDVT_MODE_KIND_TOP1 = 1,
  /*
   Exactly `n` primitives per chunk.
   */
  CDDVT_MODE_KIND_FIXED = 2,
  /*
   Allocator-driven, at most `n` primitives (0 = the model's K).
   */
  CDDVT_MODE_KIND_ADAPTIVE = 3,
} CddvtModeKind;

/*
 Opaque model handle.
 */
typedef struct CddvtModel CddvtModel;

typedef struct CddvtModelInfo {
  uintptr_t patch;
  uintptr_t channels;
  uintptr_t embed_dim;
  uintptr_t num_subcodebooks;
  uintptr_t codebook_size;
  uintptr_t max_count;
} CddvtModelInfo;

typedef struct CddvtMode {
  enum CddvtModeKind kind;
  uintptr_t n;
} CddvtMode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Static description of a status code. Never null.
 */
const char *cddvt_status_message(enum CddvtStatus status);

/*
 Message for the last failed call on this thread ("" after a success).
 Valid until the next cddvt call on the same thread.
 */
const char *cddvt_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *cddvt_version(void);

/*
 Loads a checkpoint; on success `*out` owns a new handle.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CddvtStatus cddvt_model_load(const char *path, struct CddvtModel **out);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void cddvt_model_free(struct CddvtModel *model);

/*
 # Safety
 `model` must be a live handle; `info` must be writable.
 */
enum CddvtStatus cddvt_model_info(const struct CddvtModel *model, struct CddvtModelInfo *info);

/*
 Reconstructs an image (clamped to `[0, 1]`) into `out`, which must hold
 `height * width * channels` doubles.

 # Safety
 `pixels` must hold `height * width * channels` doubles; `out` must hold `out_len`.
 */
enum CddvtStatus cddvt_reconstruct(const struct CddvtModel *model,
                                   const double *pixels,
                                   uintptr_t height,
                                   uintptr_t width,
                                   uintptr_t channels,
                                   struct CddvtMode mode,
                                   double *out,
                                   uintptr_t out_len);

/*
 Per-patch primitive counts in raster order; `out` must hold one entry per patch.

 # Safety
 As for `cddvt_reconstruct`.
 */
enum CddvtStatus cddvt_allocation_counts(const struct CddvtModel *model,
                                         const double *pixels,
                                         uintptr_t height,
                                         uintptr_t width,
                                         uintptr_t channels,
                                         struct CddvtMode mode,
                                         uint32_t *out,
                                         uintptr_t out_len);

/*
 Row-major M x M cosine similarities between sub-codebook centroids.

 # Safety
 `out` must hold `out_len` doubles.
 */
enum CddvtStatus cddvt_centroid_similarity(const struct CddvtModel *model,
                                           double *out,
                                           uintptr_t out_len);

/*
 PSNR in dB with peak 1 (99 for identical images).

 # Safety
 `a` and `b` must each hold `height * width * channels` doubles; `out` writable.
 */
enum CddvtStatus cddvt_psnr(const double *a,
                            const double *b,
                            uintptr_t height,
                            uintptr_t width,
                            uintptr_t channels,
                            double *out);

/*
 Mean SSIM over non-overlapping 8x8 windows.

 # Safety
 As for `cddvt_psnr`.
 */
enum CddvtStatus cddvt_ssim(const double *a,
                            const double *b,
                            uintptr_t height,
                            uintptr_t width,
                            uintptr_t channels,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDDVT_H */

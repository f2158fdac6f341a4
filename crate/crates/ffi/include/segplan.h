/* C ABI for the segmentation pipeline engine. */

#ifndef SEGPLAN_H
#define SEGPLAN_H

/* Generated by cbindgen from segplan-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum sp_status {
  // Success.
  SP_OK = 0,
  // Invalid inputs or state (mirrors process exit code 2).
  SP_VALIDATION_ERROR = 2,
  // Filesystem or serialization failure (mirrors process exit code 3).
  SP_IO_ERROR = 3,
  // A required pointer argument was NULL.
  SP_NULL_ARGUMENT = 4,
  // An internal panic was caught at the boundary.
  SP_PANIC = 5,
} sp_status;

// Payload interpretation of a volume.
typedef enum sp_volume_kind {
  SP_VOLUME_IMAGE = 0,
  SP_VOLUME_LABELMAP = 1,
  SP_VOLUME_SOFTMAX = 2,
} sp_volume_kind;

// Opaque handle to a dataset fingerprint.
typedef struct sp_fingerprint sp_fingerprint;

// Opaque handle to a self-configured pipeline plan.
typedef struct sp_plan sp_plan;

// Opaque handle to a voxel volume (image, labelmap, or softmax).
typedef struct sp_volume sp_volume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library (static storage).
const char *sp_version(void);

// Message for the most recent failure on this thread ("" if none).
// Valid until the next failing call on the same thread.
const char *sp_last_error_message(void);

// Read a volume from an .mvox file.
enum sp_status sp_volume_read(const char *path, struct sp_volume **out);

// Write a volume to an .mvox file.
enum sp_status sp_volume_write(const struct sp_volume *vol, const char *path);

// Create a multi-channel image volume from row-major `[channel][voxel]`
// data. `shape`/`spacing` have `ndim` entries; `data_len` must equal
// `channels * product(shape)`.
enum sp_status sp_volume_new_image(size_t channels,
                                   const size_t *shape,
                                   const double *spacing,
                                   size_t ndim,
                                   const float *data,
                                   size_t data_len,
                                   struct sp_volume **out);

// Create a labelmap volume. `data_len` must equal `product(shape)`.
enum sp_status sp_volume_new_labelmap(const size_t *shape,
                                      const double *spacing,
                                      size_t ndim,
                                      const uint8_t *data,
                                      size_t data_len,
                                      struct sp_volume **out);

// Release a volume handle. NULL is a no-op.
void sp_volume_free(struct sp_volume *vol);

// Number of spatial axes (0 if `vol` is NULL).
size_t sp_volume_ndim(const struct sp_volume *vol);

// Number of channels (0 if `vol` is NULL).
size_t sp_volume_channels(const struct sp_volume *vol);

// Payload kind. NULL maps to `SP_VOLUME_IMAGE`; check for NULL first.
enum sp_volume_kind sp_volume_kind_of(const struct sp_volume *vol);

// Copy the spatial shape into `out` (capacity `cap`); returns the number
// of axes written.
size_t sp_volume_shape(const struct sp_volume *vol, size_t *out, size_t cap);

// Copy the per-axis spacing into `out` (capacity `cap`); returns the
// number of axes written.
size_t sp_volume_spacing(const struct sp_volume *vol, double *out, size_t cap);

// Copy float payload (image/softmax volumes) into `out`.
// `cap` must be at least `channels * product(shape)`.
enum sp_status sp_volume_copy_f32(const struct sp_volume *vol, float *out, size_t cap);

// Copy label payload (labelmap volumes) into `out`.
// `cap` must be at least `product(shape)`.
enum sp_status sp_volume_copy_u8(const struct sp_volume *vol, uint8_t *out, size_t cap);

// Scan a dataset directory (with dataset.json) into a fingerprint.
enum sp_status sp_fingerprint_dataset(const char *dataset_dir, struct sp_fingerprint **out);

// Read a fingerprint JSON file.
enum sp_status sp_fingerprint_read(const char *path, struct sp_fingerprint **out);

// Write a fingerprint to a canonical JSON file.
enum sp_status sp_fingerprint_write(const struct sp_fingerprint *fp, const char *path);

// Release a fingerprint handle. NULL is a no-op.
void sp_fingerprint_free(struct sp_fingerprint *fp);

// Derive the full pipeline plan from a fingerprint.
enum sp_status sp_plan_from_fingerprint(const struct sp_fingerprint *fp, struct sp_plan **out);

// Read a plan JSON file.
enum sp_status sp_plan_read(const char *path, struct sp_plan **out);

// Write a plan to a JSON file.
enum sp_status sp_plan_write(const struct sp_plan *plan, const char *path);

// Release a plan handle. NULL is a no-op.
void sp_plan_free(struct sp_plan *plan);

// 1 when the plan includes the two-stage (coarse-to-fine) model, else 0.
int sp_plan_has_cascade(const struct sp_plan *plan);

// Number of models the plan trains.
size_t sp_plan_num_models(const struct sp_plan *plan);

// Crop, resample, and normalize every training case into `out_dir`.
// `fingerprint_path` may be NULL to re-scan the dataset.
enum sp_status sp_preprocess_dataset(const char *dataset_dir,
                                     const char *plan_path,
                                     const char *fingerprint_path,
                                     const char *out_dir);

// Run the five-fold cross-validation protocol. `predictor` is one of
// "oracle", "constant", "threshold". Booleans are 0/nonzero.
enum sp_status sp_run_cv(const char *dataset_dir,
                         const char *preprocessed_dir,
                         const char *plan_path,
                         const char *out_dir,
                         uint64_t seed,
                         const char *predictor,
                         int use_tta,
                         int simulate_scheduler);

// Largest-component filtering of a labelmap for the given classes.
enum sp_status sp_postprocess(const struct sp_volume *pred,
                              const uint8_t *classes,
                              size_t num_classes,
                              struct sp_volume **out);

// Dice overlap of one class between two labelmaps (1.0 when both empty).
enum sp_status sp_dice(const struct sp_volume *a,
                       const struct sp_volume *b,
                       uint8_t class_id,
                       double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SEGPLAN_H */

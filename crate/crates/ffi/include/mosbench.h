/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef MOSBENCH_H
#define MOSBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_ARGUMENT = 1,
  MB_STATUS_INVALID_UTF8 = 2,
  MB_STATUS_IO = 3,
  MB_STATUS_PARSE = 4,
  MB_STATUS_VALIDATION = 5,
  MB_STATUS_CONFIG = 6,
  MB_STATUS_FORMAT = 7,
  MB_STATUS_NON_FINITE = 8,
  MB_STATUS_UNDEFINED = 9,
  MB_STATUS_BUFFER_TOO_SMALL = 10,
  MB_STATUS_PANIC = 11,
} MbStatus;

/**
 * A frame matrix, as stored in an EMB1 file.
 */
typedef struct MbFrames MbFrames;

/**
 * A loaded checkpoint.
 */
typedef struct MbModel MbModel;

/**
 * A validated rating table.
 */
typedef struct MbRatingTable MbRatingTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or an empty string.
 */
const char *mb_last_error(void);

/**
 * Library version, a static NUL-terminated string.
 */
const char *mb_version(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MbStatus mb_model_load(const char *path, struct MbModel **out);

/**
 * # Safety
 * `model` must come from `mb_model_load` and not be freed twice. Null is ignored.
 */
void mb_model_free(struct MbModel *model);

/**
 * Trainable parameter count; 0 for a constant-mean checkpoint.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum MbStatus mb_model_parameter_count(const struct MbModel *model, size_t *out);

/**
 * Length of the one-hot metadata vector the model consumes.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum MbStatus mb_model_metadata_width(const struct MbModel *model, size_t *out);

/**
 * Predicts one utterance. `frames` may be null and `baseline_mos` NaN when
 * the model does not use them. Non-zero `blinded` hides the rater group.
 *
 * # Safety
 * String arguments must be NUL-terminated; `frames` null or a valid handle;
 * `out` valid.
 */
enum MbStatus mb_model_predict(const struct MbModel *model,
                               const char *system_id,
                               const char *rater_group_id,
                               const struct MbFrames *frames,
                               double baseline_mos,
                               int blinded,
                               double *out);

/**
 * Copies `n_frames * dim` frame-major values.
 *
 * # Safety
 * `data` must point to `n_frames * dim` doubles; `out` must be valid.
 */
enum MbStatus mb_frames_new(size_t n_frames, size_t dim, const double *data, struct MbFrames **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MbStatus mb_emb_read(const char *path, struct MbFrames **out);

/**
 * Writes `frames` as EMB1 (values rounded to 32-bit floats).
 *
 * # Safety
 * `path` must be NUL-terminated and `frames` a valid handle.
 */
enum MbStatus mb_emb_write(const char *path, const struct MbFrames *frames);

/**
 * # Safety
 * `frames` must be a valid handle or null.
 */
size_t mb_frames_n_frames(const struct MbFrames *frames);

/**
 * # Safety
 * `frames` must be a valid handle or null.
 */
size_t mb_frames_dim(const struct MbFrames *frames);

/**
 * Copies the frame-major values into `buf`, which holds `len` doubles.
 *
 * # Safety
 * `frames` must be valid and `buf` writable for `len` doubles.
 */
enum MbStatus mb_frames_copy(const struct MbFrames *frames, double *buf, size_t len);

/**
 * # Safety
 * `frames` must come from this library and not be freed twice. Null is ignored.
 */
void mb_frames_free(struct MbFrames *frames);

/**
 * Loads and validates a ratings CSV.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MbStatus mb_ratings_load(const char *path, struct MbRatingTable **out);

/**
 * Number of ratings.
 *
 * # Safety
 * `table` must be a valid handle or null.
 */
size_t mb_ratings_len(const struct MbRatingTable *table);

/**
 * Number of distinct utterances.
 *
 * # Safety
 * `table` must be a valid handle or null.
 */
size_t mb_ratings_utterance_count(const struct MbRatingTable *table);

/**
 * Utterance MOS values in utterance-id order, written to `buf` (`len` doubles).
 *
 * # Safety
 * `table` must be valid and `buf` writable for `len` doubles.
 */
enum MbStatus mb_ratings_utterance_mos(const struct MbRatingTable *table, double *buf, size_t len);

/**
 * # Safety
 * `table` must come from `mb_ratings_load` and not be freed twice. Null is ignored.
 */
void mb_ratings_free(struct MbRatingTable *table);

/**
 * Spearman rank correlation with average ranks for ties.
 * Returns `MB_STATUS_UNDEFINED` when either input has no rank variance.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `out` must be valid.
 */
enum MbStatus mb_srcc(const double *x, const double *y, size_t n, double *out);

/**
 * Mean squared error.
 *
 * # Safety
 * `x` and `y` must point to `n` doubles; `out` must be valid.
 */
enum MbStatus mb_mse(const double *x, const double *y, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOSBENCH_H */

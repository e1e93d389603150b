#ifndef TSPROTO_H
#define TSPROTO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum {
  TS_PROJECTION_MODE_GREEDY = 0,
  TS_PROJECTION_MODE_JOINT = 1,
} TsProjectionMode;

/**
 * Result code of every fallible call.
 */
typedef enum {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_BUFFER_TOO_SMALL = 3,
  TS_STATUS_BAD_MAGIC = 4,
  TS_STATUS_TRUNCATED_PAYLOAD = 5,
  TS_STATUS_VERSION_UNSUPPORTED = 6,
  TS_STATUS_LENGTH_MISMATCH = 7,
  TS_STATUS_MALFORMED = 8,
  TS_STATUS_INVALID_FEATURE_SET = 9,
  TS_STATUS_PARSE_ERROR = 10,
  TS_STATUS_IO = 11,
  TS_STATUS_DEGENERATE_ATOM = 12,
  TS_STATUS_DIMENSION_MISMATCH = 13,
  TS_STATUS_EMPTY_GROUP = 14,
  TS_STATUS_COMPUTE_ERROR = 15,
  TS_STATUS_PANIC = 99,
} TsStatus;

/**
 * Opaque paired feature set.
 */
typedef struct TsFeatureSet TsFeatureSet;

/**
 * Opaque prototype set for one group.
 */
typedef struct TsPrototypeSet TsPrototypeSet;

typedef struct {
  size_t records;
  size_t dim_t;
  size_t dim_s;
  size_t groups;
  /**
   * Logit length, or 0 when the set carries no logits.
   */
  size_t num_logits;
} TsFeatureSetInfo;

typedef struct {
  uint32_t class_id;
  uint32_t level_id;
} TsGroupKey;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ts_version(void);

/**
 * Message of the last failure on the calling thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ts_last_error_message(void);

/**
 * Decodes a PFS1 buffer and validates it.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
TsStatus ts_feature_set_from_pfs1(const uint8_t *data, size_t len, TsFeatureSet **out);

/**
 * Reads a feature set from `path` (`.csv` or PFS1) and validates it.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
TsStatus ts_feature_set_read(const char *path, TsFeatureSet **out);

/**
 * Writes `set` to `path`, as CSV when the extension is `.csv` and as PFS1
 * otherwise.
 *
 * # Safety
 * `set` must be a live handle and `path` a NUL-terminated string.
 */
TsStatus ts_feature_set_write(const TsFeatureSet *set, const char *path, bool use_f32);

/**
 * # Safety
 * `set` must be a live handle and `info` writable.
 */
TsStatus ts_feature_set_info(const TsFeatureSet *set, TsFeatureSetInfo *info);

/**
 * Groups present in `set`, in ascending order.
 *
 * # Safety
 * `set` must be a live handle; `out` must hold `capacity` entries.
 */
TsStatus ts_feature_set_groups(const TsFeatureSet *set,
                               TsGroupKey *out,
                               size_t capacity,
                               size_t *written);

/**
 * # Safety
 * `set` must be null or a handle returned by this library, freed once.
 */
void ts_feature_set_free(TsFeatureSet *set);

/**
 * Coupled coefficient solve for one residual pair against one atom pair.
 *
 * # Safety
 * `r_t`, `g_t` must hold `dim_t` values; `r_s`, `g_s` must hold `dim_s`.
 */
TsStatus ts_solve_pair_coefficients(const double *r_t,
                                    const double *g_t,
                                    size_t dim_t,
                                    const double *r_s,
                                    const double *g_s,
                                    size_t dim_s,
                                    double lambda,
                                    double *w_t,
                                    double *w_s);

/**
 * Greedy prototype selection for one group.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
TsStatus ts_prototypes_generate(const TsFeatureSet *set,
                                TsGroupKey group,
                                size_t k,
                                double lambda,
                                TsPrototypeSet **out);

/**
 * Selected instance ids in selection order.
 *
 * # Safety
 * `protos` must be a live handle; `out` must hold `capacity` entries.
 */
TsStatus ts_prototypes_indices(const TsPrototypeSet *protos,
                               uint64_t *out,
                               size_t capacity,
                               size_t *written);

/**
 * Joint objective before selection followed by its value after each step.
 *
 * # Safety
 * `protos` must be a live handle; `out` must hold `capacity` entries.
 */
TsStatus ts_prototypes_objectives(const TsPrototypeSet *protos,
                                  double *out,
                                  size_t capacity,
                                  size_t *written);

/**
 * Whether the group held fewer instances than requested.
 *
 * # Safety
 * `protos` must be a live handle and `capped` writable.
 */
TsStatus ts_prototypes_capped(const TsPrototypeSet *protos, bool *capped);

/**
 * Projects one feature pair onto the prototypes. Both coefficient buffers
 * receive one value per prototype; `sigma` receives the robustness weight.
 *
 * # Safety
 * `protos` must be a live handle; `f_t` and `f_s` must hold `dim_t` and
 * `dim_s` values; both coefficient buffers must hold `capacity` entries.
 */
TsStatus ts_prototypes_project(const TsPrototypeSet *protos,
                               const double *f_t,
                               size_t dim_t,
                               const double *f_s,
                               size_t dim_s,
                               double lambda,
                               TsProjectionMode mode,
                               double *lambda_t,
                               double *lambda_s,
                               size_t capacity,
                               size_t *written,
                               double *sigma);

/**
 * # Safety
 * `protos` must be null or a handle returned by this library, freed once.
 */
void ts_prototypes_free(TsPrototypeSet *protos);

/**
 * Robustness weight of every record, in record order, with prototypes
 * generated per group from `set` itself.
 *
 * # Safety
 * `set` must be a live handle; `out` must hold `capacity` entries.
 */
TsStatus ts_robust_weights(const TsFeatureSet *set,
                           size_t k,
                           double lambda,
                           TsProjectionMode mode,
                           double *out,
                           size_t capacity,
                           size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSPROTO_H */

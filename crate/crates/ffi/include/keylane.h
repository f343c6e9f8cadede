#ifndef KEYLANE_H
#define KEYLANE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KlStatus {
  KL_STATUS_OK = 0,
  KL_STATUS_NULL_POINTER = 1,
  KL_STATUS_INVALID_UTF8 = 2,
  KL_STATUS_INVALID_INPUT = 3,
  KL_STATUS_NUMERIC = 4,
  KL_STATUS_IO = 5,
  KL_STATUS_PANIC = 6,
} KlStatus;

typedef enum KlMetric {
  KL_METRIC_CULANE = 0,
  KL_METRIC_TUSIMPLE = 1,
} KlMetric;

// A lane scene in image coordinates.
typedef struct KlScene KlScene;

// Encoded supervision maps for one scene.
typedef struct KlTargets KlTargets;

typedef struct KlEncoderConfig {
  uint32_t stride;
  // Gaussian spread in map cells.
  double sigma;
  uint32_t points_per_lane;
} KlEncoderConfig;

typedef struct KlDecoderConfig {
  double keypoint_threshold;
  // Vote-to-start distance bound, in map cells.
  double theta_dis;
  uint32_t nms_width;
  double start_norm_limit;
  // Nonzero selects parallel association.
  uint8_t parallel;
} KlDecoderConfig;

// Evaluation counts and rates. `accuracy` is NaN for the CULane metric.
typedef struct KlEvalReport {
  size_t tp;
  size_t fp;
  size_t fn_;
  double precision;
  double recall;
  double f1;
  double accuracy;
} KlEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *kl_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next keylane call on the same thread.
const char *kl_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, freed once.
void kl_string_free(char *s);

struct KlEncoderConfig kl_encoder_config_default(void);

struct KlDecoderConfig kl_decoder_config_default(void);

// Parses Lane JSON.
//
// # Safety
// `json` must be NULL or NUL-terminated; `out` must be NULL or writable.
enum KlStatus kl_scene_from_json(const char *json, struct KlScene **out);

// Serializes a scene as Lane JSON. Free the result with `kl_string_free`.
//
// # Safety
// `scene` must be NULL or a live handle; `out` must be NULL or writable.
enum KlStatus kl_scene_to_json(const struct KlScene *scene, char **out);

// # Safety
// `scene` must be NULL or a live handle; `out` must be NULL or writable.
enum KlStatus kl_scene_lane_count(const struct KlScene *scene, size_t *out);

// # Safety
// `scene` must be NULL or a handle not yet freed.
void kl_scene_free(struct KlScene *scene);

// Seeded synthetic scene with `num_lanes` lanes on an 800x320 image.
//
// # Safety
// `out` must be NULL or writable.
enum KlStatus kl_synth(uint32_t num_lanes, uint64_t seed, struct KlScene **out);

// Encodes a scene. `cfg` may be NULL for the defaults.
//
// # Safety
// Pointers must be NULL or valid for their types.
enum KlStatus kl_encode(const struct KlScene *scene,
                        const struct KlEncoderConfig *cfg,
                        struct KlTargets **out);

// Writes the five tensor files into `dir`, creating it if needed.
//
// # Safety
// `targets` must be NULL or a live handle; `dir` NULL or NUL-terminated.
enum KlStatus kl_targets_write(const struct KlTargets *targets, const char *dir);

// # Safety
// `targets` must be NULL or a live handle; `out` NULL or writable.
enum KlStatus kl_targets_mask_count(const struct KlTargets *targets, size_t *out);

// Output grid size in cells.
//
// # Safety
// `targets` must be NULL or a live handle; outputs NULL or writable.
enum KlStatus kl_targets_shape(const struct KlTargets *targets, size_t *height, size_t *width);

// Borrowed row-major confidence map of `height * width` values. The
// pointer lives as long as the handle.
//
// # Safety
// `targets` must be NULL or a live handle; outputs NULL or writable.
enum KlStatus kl_targets_confidence(const struct KlTargets *targets,
                                    const double **data,
                                    size_t *len);

// # Safety
// `targets` must be NULL or a handle not yet freed.
void kl_targets_free(struct KlTargets *targets);

// Decodes encoded targets back into lanes. `cfg` may be NULL.
//
// # Safety
// Pointers must be NULL or valid for their types.
enum KlStatus kl_decode_targets(const struct KlTargets *targets,
                                const struct KlDecoderConfig *cfg,
                                struct KlScene **out);

// Decodes the confidence, quant and offset tensor files in `dir`.
//
// # Safety
// Pointers must be NULL or valid for their types.
enum KlStatus kl_decode_dir(const char *dir,
                            const struct KlDecoderConfig *cfg,
                            struct KlScene **out);

// Scores `pred` against `gt` with the default settings of `metric`, a
// `KlMetric` value.
//
// # Safety
// Pointers must be NULL or valid for their types.
enum KlStatus kl_eval(const struct KlScene *pred,
                      const struct KlScene *gt,
                      uint32_t metric,
                      struct KlEvalReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KEYLANE_H */

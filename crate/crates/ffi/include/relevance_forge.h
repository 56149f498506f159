/* C interface for the relevance-forge lesion-localization library. */

#ifndef RELEVANCE_FORGE_H
#define RELEVANCE_FORGE_H

/* Generated by cbindgen from the relevance-forge-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible function. `Ok` is zero; the
 * nonzero values match the CLI exit codes where one exists.
 */
typedef enum RfStatus {
  RF_STATUS_OK = 0,
  /**
   * I/O failure other than a missing file.
   */
  RF_STATUS_IO = 1,
  /**
   * Invalid configuration or option value.
   */
  RF_STATUS_CONFIG = 2,
  /**
   * A required input file does not exist.
   */
  RF_STATUS_MISSING_INPUT = 3,
  /**
   * A file or buffer exists but its contents are malformed.
   */
  RF_STATUS_FORMAT = 4,
  /**
   * A numeric operation produced a non-finite value.
   */
  RF_STATUS_NON_FINITE = 5,
  /**
   * The combined relevance scores are constant; no ranking exists.
   */
  RF_STATUS_DEGENERATE_MAP = 6,
  /**
   * Shape mismatch between volumes, masks, or maps.
   */
  RF_STATUS_DIMENSION = 7,
  /**
   * A function was called outside its contract.
   */
  RF_STATUS_USAGE = 8,
  /**
   * A required pointer argument was null.
   */
  RF_STATUS_NULL_ARGUMENT = 9,
  /**
   * A string argument was not valid UTF-8.
   */
  RF_STATUS_INVALID_UTF8 = 10,
  /**
   * The library caught a panic; state is unchanged.
   */
  RF_STATUS_PANIC = 11,
} RfStatus;

/**
 * Which architecture a parameter file holds.
 */
typedef enum RfModelKind {
  RF_MODEL_KIND_CLASSIFIER = 0,
  RF_MODEL_KIND_GENERATOR = 1,
} RfModelKind;

/**
 * Opaque trained-parameter handle.
 */
typedef struct RfModel RfModel;

/**
 * Opaque ranked relevance map.
 */
typedef struct RfRelevanceMap RfRelevanceMap;

/**
 * Opaque multi-channel voxel volume (channel-major, f32).
 */
typedef struct RfVolume RfVolume;

/**
 * Relevance settings; get defaults from [`rf_relevance_options_default`].
 */
typedef struct RfRelevanceOptions {
  /**
   * Number of rank bins (≥ 2).
   */
  size_t bins;
  /**
   * When true, low mask values rank as most relevant (inverted scores).
   */
  bool low_mask_is_relevant;
  /**
   * When true, paint region means instead of region sums.
   */
  bool paint_mean;
  /**
   * Superpixel count (≥ 2).
   */
  size_t slic_k;
  /**
   * Compactness weight (> 0).
   */
  double slic_m;
  /**
   * Maximum superpixel iterations (≥ 1).
   */
  uint32_t slic_max_iters;
  /**
   * Region-size fraction below which components are merged.
   */
  double slic_min_size_fraction;
} RfRelevanceOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failing call on this thread. The pointer
 * stays valid until the next failing call on the same thread. Never null.
 */
const char *rf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rf_version(void);

/**
 * Read a volume file. On success writes a new handle to `out`.
 */
enum RfStatus rf_volume_read(const char *path, struct RfVolume **out);

/**
 * Build a volume from a caller buffer of `len` f32 values laid out
 * channel-major. `len` must equal channels·depth·height·width.
 */
enum RfStatus rf_volume_create(size_t channels,
                               size_t depth,
                               size_t height,
                               size_t width,
                               const float *data,
                               size_t len,
                               struct RfVolume **out);

/**
 * Write a volume to a file.
 */
enum RfStatus rf_volume_write(const struct RfVolume *volume, const char *path);

/**
 * Channel count, or 0 for a null handle.
 */
size_t rf_volume_channels(const struct RfVolume *volume);

/**
 * Spatial dimensions. Null-safe: writes zeros for a null handle.
 */
void rf_volume_dims(const struct RfVolume *volume, size_t *depth, size_t *height, size_t *width);

/**
 * Total value count (channels · depth · height · width).
 */
size_t rf_volume_len(const struct RfVolume *volume);

/**
 * Copy all values into `buf`, which must hold exactly `rf_volume_len`
 * entries.
 */
enum RfStatus rf_volume_copy_data(const struct RfVolume *volume, float *buf, size_t len);

/**
 * Destroy a volume handle. Null is a no-op.
 */
void rf_volume_free(struct RfVolume *volume);

/**
 * Load a parameter file (.rnet).
 */
enum RfStatus rf_model_load(const char *path, struct RfModel **out);

/**
 * Architecture stored in the file.
 */
enum RfStatus rf_model_kind(const struct RfModel *model, enum RfModelKind *out);

/**
 * Stable checksum over tag, parameter names, shapes and values.
 */
enum RfStatus rf_model_checksum(const struct RfModel *model, uint64_t *out);

/**
 * Destroy a model handle. Null is a no-op.
 */
void rf_model_free(struct RfModel *model);

/**
 * Classifier probability (0..1) that the volume is class 1.
 */
enum RfStatus rf_classifier_probability(const struct RfModel *model,
                                        const struct RfVolume *volume,
                                        double *out);

/**
 * Run the generator, producing a perturbation mask volume (values 0..1)
 * with the input's shape.
 */
enum RfStatus rf_generator_mask(const struct RfModel *model,
                                const struct RfVolume *volume,
                                struct RfVolume **out);

/**
 * The default relevance settings.
 */
struct RfRelevanceOptions rf_relevance_options_default(void);

/**
 * Build a relevance map from a volume and its perturbation mask (a volume
 * of values in 0..1 with the same shape).
 */
enum RfStatus rf_relevance_generate(const struct RfVolume *volume,
                                    const struct RfVolume *mask,
                                    struct RfRelevanceOptions options,
                                    struct RfRelevanceMap **out);

/**
 * Baseline map: zero each superpixel in turn and score the classifier
 * change. `low_mask_is_relevant` is ignored (scores are never inverted).
 */
enum RfStatus rf_blank_baseline(const struct RfVolume *volume,
                                const struct RfModel *classifier,
                                struct RfRelevanceOptions options,
                                struct RfRelevanceMap **out);

/**
 * Number of rank bins in the map.
 */
size_t rf_relevance_bin_count(const struct RfRelevanceMap *map);

/**
 * Voxel count of the map (depth · height · width).
 */
size_t rf_relevance_len(const struct RfRelevanceMap *map);

/**
 * Copy per-voxel ranks (0 = most relevant) into `buf` of exactly
 * `rf_relevance_len` entries.
 */
enum RfStatus rf_relevance_copy_ranks(const struct RfRelevanceMap *map, uint32_t *buf, size_t len);

/**
 * Copy combined (summed painted) scores into `buf` of exactly
 * `rf_relevance_len` entries.
 */
enum RfStatus rf_relevance_copy_combined(const struct RfRelevanceMap *map, float *buf, size_t len);

/**
 * Destroy a relevance map handle. Null is a no-op.
 */
void rf_relevance_map_free(struct RfRelevanceMap *map);

/**
 * Dice similarity of two binary volumes (values exactly 0 or 1).
 */
enum RfStatus rf_dice(const struct RfVolume *a, const struct RfVolume *b, double *out);

/**
 * Best Dice over nested unions of the top k ranks, and the smallest k
 * achieving it. `truth` is a binary volume.
 */
enum RfStatus rf_optimal_threshold_dice(const struct RfRelevanceMap *map,
                                        const struct RfVolume *truth,
                                        double *out_dsc,
                                        size_t *out_k_star);

/**
 * Per-rank Dice against a binary truth volume; `buf` must hold exactly
 * `rf_relevance_bin_count` entries.
 */
enum RfStatus rf_ranked_dice(const struct RfRelevanceMap *map,
                             const struct RfVolume *truth,
                             double *buf,
                             size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELEVANCE_FORGE_H */

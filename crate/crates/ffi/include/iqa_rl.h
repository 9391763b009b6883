#ifndef IQA_RL_H
#define IQA_RL_H

/* Generated by cbindgen from the iqa-rl-ffi Rust sources; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define IQARL_OK 0

/**
 * Malformed or semantically invalid input.
 */
#define IQARL_ERR_VALIDATION 1

/**
 * Filesystem failure.
 */
#define IQARL_ERR_IO 2

/**
 * A required pointer argument was null.
 */
#define IQARL_ERR_NULL_POINTER 3

/**
 * A string argument was not valid UTF-8.
 */
#define IQARL_ERR_UTF8 4

/**
 * An internal panic was caught at the boundary.
 */
#define IQARL_ERR_PANIC 5

/**
 * Opaque engine handle holding the validated configuration.
 */
typedef struct IqarlEngine IqarlEngine;

/**
 * The four computed image descriptors, all finite on success.
 */
typedef struct IqarlHints {
  /**
   * Mean luma, normalized to `[0, 1]`.
   */
  double brightness;
  /**
   * Luma standard deviation, normalized to `[0, 1]`.
   */
  double contrast;
  /**
   * Opponent-color colorfulness, normalized by 255.
   */
  double colorfulness;
  /**
   * Variance of the Laplacian over interior pixels, in squared luma.
   */
  double sharpness;
} IqarlHints;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates an engine with the built-in default configuration.
 *
 * Returns null only if an internal panic occurs. Release the handle with
 * [`iqarl_engine_free`].
 */
struct IqarlEngine *iqarl_engine_new(void);

/**
 * Creates an engine from a `key = value` configuration file.
 *
 * Returns null on failure; [`iqarl_last_error_message`] describes why.
 *
 * # Safety
 * `path` must be null or point to a NUL-terminated string.
 */
struct IqarlEngine *iqarl_engine_from_file(const char *path);

/**
 * Releases an engine handle. Null is a no-op. The handle must not be used
 * afterwards.
 *
 * # Safety
 * `engine` must be null or a pointer returned by an `iqarl_engine_*`
 * constructor that has not been freed yet.
 */
void iqarl_engine_free(struct IqarlEngine *engine);

/**
 * Returns the message of the most recent failure on this thread as a
 * caller-owned string (empty if the last call succeeded). Release it with
 * [`iqarl_string_free`].
 */
char *iqarl_last_error_message(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `text` must be null or a pointer obtained from this library that has not
 * been freed yet.
 */
void iqarl_string_free(char *text);

/**
 * Parses one response text and writes its binary format reward (exactly
 * 0.0 or 1.0) to `out_reward`.
 *
 * `turn_index` is 1-based; `width`/`height` describe the image the turn
 * saw. Unparseable text is not an error: it scores 0.
 *
 * # Safety
 * `text` must be null or NUL-terminated; `out_reward` must be null or
 * writable.
 */
int32_t iqarl_format_reward(const char *text,
                            uint32_t width,
                            uint32_t height,
                            size_t turn_index,
                            double *out_reward);

/**
 * Writes the Gaussian score-closeness reward for a predicted rating against
 * the ground truth, using the engine's bandwidth.
 *
 * # Safety
 * `engine` must be a live engine handle; `out_reward` must be writable.
 */
int32_t iqarl_score_reward(const struct IqarlEngine *engine,
                           double r_pred,
                           double r_gt,
                           double *out_reward);

/**
 * Scores a batch of rollout records (JSONL, one record per line) and
 * evaluates the training-step objective.
 *
 * On success writes the reward-annotated records as JSONL to
 * `out_annotated_jsonl` (unless null) and the step report as JSON to
 * `out_report_json` (unless null). Both are caller-owned strings.
 *
 * # Safety
 * `engine` must be a live engine handle; `rollouts_jsonl` must be
 * NUL-terminated; the out pointers must be null or writable.
 */
int32_t iqarl_reward_rollouts(const struct IqarlEngine *engine,
                              const char *rollouts_jsonl,
                              char **out_annotated_jsonl,
                              char **out_report_json);

/**
 * Runs the visual-reliance filter over paired-generation records (JSONL,
 * one record per line) with the engine's thresholds.
 *
 * On success writes a JSON document `{"outcomes": [...], "summary": {...}}`
 * to `out_json` as a caller-owned string.
 *
 * # Safety
 * `engine` must be a live engine handle; `records_jsonl` must be
 * NUL-terminated; `out_json` must be writable.
 */
int32_t iqarl_vrf_filter(const struct IqarlEngine *engine,
                         const char *records_jsonl,
                         char **out_json);

/**
 * Computes the four image descriptors from an interleaved 8-bit RGB buffer
 * of `rgb_len` bytes (`width * height * 3`).
 *
 * # Safety
 * `rgb` must point to `rgb_len` readable bytes; `out_hints` must be
 * writable.
 */
int32_t iqarl_compute_hints(const uint8_t *rgb,
                            size_t rgb_len,
                            size_t width,
                            size_t height,
                            struct IqarlHints *out_hints);

/**
 * Pearson linear correlation of two length-`len` arrays.
 *
 * # Safety
 * `xs` and `ys` must point to `len` readable doubles; `out` must be
 * writable.
 */
int32_t iqarl_plcc(const double *xs, const double *ys, size_t len, double *out);

/**
 * Spearman rank correlation of two length-`len` arrays.
 *
 * # Safety
 * `xs` and `ys` must point to `len` readable doubles; `out` must be
 * writable.
 */
int32_t iqarl_srcc(const double *xs, const double *ys, size_t len, double *out);

/**
 * Fraction of distinct values among `len` scores after rounding to
 * `decimals` places.
 *
 * # Safety
 * `scores` must point to `len` readable doubles; `out` must be writable.
 */
int32_t iqarl_unique_score_ratio(const double *scores, size_t len, uint32_t decimals, double *out);

/**
 * Runs one arm of the toy score-diversity collapse experiment and writes
 * the full run report as JSON to `out_report_json` (caller-owned).
 *
 * `steps` of 0 keeps the built-in default schedule.
 *
 * # Safety
 * `out_report_json` must be writable.
 */
int32_t iqarl_train_sim(bool klc_on, uint64_t seed, size_t steps, char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IQA_RL_H */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef COEVO_H
#define COEVO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CoevoStatus {
  CoevoStatus_Ok = 0,
  CoevoStatus_NullPointer = 1,
  CoevoStatus_InvalidArgument = 2,
  CoevoStatus_Config = 3,
  CoevoStatus_InitFailed = 4,
  CoevoStatus_LogParse = 5,
  CoevoStatus_Runtime = 6,
  CoevoStatus_Panic = 7,
} CoevoStatus;

/**
 * A running search.
 */
typedef struct CoevoEngine CoevoEngine;

/**
 * A trajectory log loaded into memory.
 */
typedef struct CoevoLog CoevoLog;

/**
 * Similarity statistics: `mu`, population `sigma`, the closed band and the
 * three upper intervals as `[lo, hi]` pairs.
 */
typedef struct CoevoSimilarityStats {
  double mu;
  double sigma;
  size_t sample_count;
  double band_lo;
  double band_hi;
  double interval_lo[3];
  double interval_hi[3];
} CoevoSimilarityStats;

/**
 * One metrics row.
 */
typedef struct CoevoSnapshot {
  uint32_t generation;
  uint64_t evaluations_used;
  double top_f[3];
  double top_auc[3];
  double uniqueness;
  double diversity;
  double validity;
  double hv_population;
  double hv_archive;
} CoevoSnapshot;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a
 * success. Valid until the next call on the same thread.
 */
const char *coevo_last_error(void);

/**
 * Whether `a` Pareto-dominates `b` (maximization); both have `k` entries.
 *
 * # Safety
 * `a` and `b` must point to `k` readable doubles; `out_result` must be writable.
 */
enum CoevoStatus coevo_dominates(const double *a, const double *b, size_t k, bool *out_result);

/**
 * Exact hypervolume of `n` row-major points of dimension `k` above
 * `reference`.
 *
 * # Safety
 * `points` must hold `n * k` doubles, `reference` `k` doubles.
 */
enum CoevoStatus coevo_hypervolume(const double *points,
                                   size_t n,
                                   size_t k,
                                   const double *reference,
                                   double *out_value);

/**
 * Preference loss of one pair from policy and reference log-probabilities.
 * Rejected log-probabilities may be `-inf`.
 *
 * # Safety
 * `out_loss` must be writable.
 */
enum CoevoStatus coevo_dpo_loss(double policy_chosen,
                                double policy_rejected,
                                double ref_chosen,
                                double ref_rejected,
                                double beta,
                                double *out_loss);

/**
 * Statistics of `n` similarity samples.
 *
 * # Safety
 * `samples` must hold `n` doubles; `out_stats` must be writable.
 */
enum CoevoStatus coevo_similarity_stats(const double *samples,
                                        size_t n,
                                        struct CoevoSimilarityStats *out_stats);

/**
 * Tanimoto similarity of the n-gram fingerprints of two strings.
 *
 * # Safety
 * `a` and `b` must be nul-terminated UTF-8.
 */
enum CoevoStatus coevo_tanimoto_text(const char *a, const char *b, double *out_value);

/**
 * Loads a run config and initializes the population. `out_dir` may be null
 * to keep everything in memory.
 *
 * # Safety
 * `config_path` must be nul-terminated UTF-8, `out_dir` null or the same;
 * `out_engine` must be writable.
 */
enum CoevoStatus coevo_engine_new_from_config(const char *config_path,
                                              const char *out_dir,
                                              struct CoevoEngine **out_engine);

/**
 * Runs one generation. `out_advanced` is false once the budget is spent, in
 * which case `out_snapshot` is left untouched.
 *
 * # Safety
 * `engine` must come from [`coevo_engine_new_from_config`] and not be freed.
 */
enum CoevoStatus coevo_engine_step(struct CoevoEngine *engine,
                                   struct CoevoSnapshot *out_snapshot,
                                   bool *out_advanced);

/**
 * Runs the remaining generations and writes the artifacts.
 *
 * # Safety
 * `engine` must be a live handle.
 */
enum CoevoStatus coevo_engine_finish(struct CoevoEngine *engine);

/**
 * Releases an engine handle; null is ignored.
 *
 * # Safety
 * `engine` must be null or a live handle, not used afterwards.
 */
void coevo_engine_free(struct CoevoEngine *engine);

/**
 * Reads and validates a trajectory log.
 *
 * # Safety
 * `path` must be nul-terminated UTF-8; `out_log` must be writable.
 */
enum CoevoStatus coevo_log_open(const char *path, struct CoevoLog **out_log);

/**
 * Number of records in the log, the init record included.
 *
 * # Safety
 * `log` must be a live handle.
 */
enum CoevoStatus coevo_log_len(const struct CoevoLog *log, size_t *out_len);

/**
 * Synthesizes preference pairs from the last `window` prompts and writes
 * them as JSON lines to `dataset_path` (an empty file when none qualify).
 *
 * # Safety
 * `log` must be a live handle; `dataset_path` nul-terminated UTF-8.
 */
enum CoevoStatus coevo_log_synthesize(const struct CoevoLog *log,
                                      size_t window,
                                      double alpha,
                                      size_t pairs_per_prompt,
                                      const char *dataset_path,
                                      size_t *out_count);

/**
 * Releases a log handle; null is ignored.
 *
 * # Safety
 * `log` must be null or a live handle, not used afterwards.
 */
void coevo_log_free(struct CoevoLog *log);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COEVO_H */

#ifndef DLRM_H
#define DLRM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DlrmStatus {
  DLRM_STATUS_OK = 0,
  DLRM_STATUS_NULL_POINTER = 1,
  DLRM_STATUS_INVALID_ARGUMENT = 2,
  DLRM_STATUS_INVALID_CONFIG = 3,
  DLRM_STATUS_SHAPE_MISMATCH = 4,
  DLRM_STATUS_INDEX_OUT_OF_RANGE = 5,
  DLRM_STATUS_IO = 6,
  DLRM_STATUS_PARSE = 7,
  /**
   * A call needed state the handle does not have yet, such as training
   * without an optimizer.
   */
  DLRM_STATUS_INVALID_STATE = 8,
  DLRM_STATUS_PANIC = 99,
} DlrmStatus;

typedef enum DlrmOptimizerKind {
  DLRM_OPTIMIZER_KIND_SGD = 0,
  DLRM_OPTIMIZER_KIND_ADAGRAD = 1,
} DlrmOptimizerKind;

/**
 * A model plus, once configured, its optimizer state.
 */
typedef struct DlrmModel DlrmModel;

typedef struct DlrmTraceProfile DlrmTraceProfile;

/**
 * Model shape. Arrays are borrowed for the duration of the call only.
 */
typedef struct DlrmConfigDesc {
  const size_t *embedding_sizes;
  size_t num_tables;
  size_t sparse_dim;
  /**
   * Bottom MLP widths including the dense input width.
   */
  const size_t *bottom_mlp;
  size_t bottom_len;
  /**
   * Top MLP layer widths; the input width is derived. Must end in 1.
   */
  const size_t *top_mlp;
  size_t top_len;
  uint64_t seed;
} DlrmConfigDesc;

/**
 * One table's lookups for a batch: `batch + 1` offsets into `indices`.
 */
typedef struct DlrmSparseInput {
  const size_t *offsets;
  size_t offsets_len;
  const size_t *indices;
  size_t indices_len;
} DlrmSparseInput;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to fit) and returns the full message length in
 * bytes, excluding the terminator. Pass a null `buf` to query the length.
 * The message is empty after a successful call.
 */
size_t dlrm_last_error_message(char *buf, size_t len);

/**
 * Writes `n + 1` prefix sums of `lengths` (leading 0) to `offsets_out`.
 */
enum DlrmStatus dlrm_offsets_from_lengths(const size_t *lengths, size_t n, size_t *offsets_out);

/**
 * Parameter count of a configuration, computed from the shapes alone.
 */
enum DlrmStatus dlrm_config_param_count(const struct DlrmConfigDesc *config, uint64_t *out);

/**
 * Embedding parameters only, computed from the shapes alone.
 */
enum DlrmStatus dlrm_config_embedding_param_count(const struct DlrmConfigDesc *config,
                                                  uint64_t *out);

/**
 * Randomly initialized model from `config`.
 */
enum DlrmStatus dlrm_model_new(const struct DlrmConfigDesc *config, struct DlrmModel **out);

/**
 * Reads a checkpoint written by [`dlrm_model_save`] or the `dlrm` binary.
 */
enum DlrmStatus dlrm_model_load(const char *path, struct DlrmModel **out);

enum DlrmStatus dlrm_model_save(const struct DlrmModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 */
void dlrm_model_free(struct DlrmModel *model);

enum DlrmStatus dlrm_model_param_count(const struct DlrmModel *model, uint64_t *out);

/**
 * Width of the dense input each sample must provide.
 */
enum DlrmStatus dlrm_model_dense_dim(const struct DlrmModel *model, size_t *out);

/**
 * Copies every parameter (bottom MLP, top MLP, then tables) into `out`,
 * which must hold exactly the parameter count.
 */
enum DlrmStatus dlrm_model_params(const struct DlrmModel *model, double *out, size_t len);

/**
 * Click probabilities for `batch_size` samples. `dense` is
 * `batch_size × dense_dim` row-major; `sparse` holds one entry per table.
 */
enum DlrmStatus dlrm_model_forward(const struct DlrmModel *model,
                                   const double *dense,
                                   size_t batch_size,
                                   const struct DlrmSparseInput *sparse,
                                   size_t num_tables,
                                   double *probs_out);

/**
 * Attaches a fresh optimizer, discarding any previous state.
 */
enum DlrmStatus dlrm_model_set_optimizer(struct DlrmModel *model,
                                         enum DlrmOptimizerKind kind,
                                         double learning_rate);

/**
 * One forward, backward and update step. Labels are 0 or 1. The mean
 * binary cross-entropy before the update goes to `loss_out` if non-null.
 */
enum DlrmStatus dlrm_model_train_step(struct DlrmModel *model,
                                      const double *dense,
                                      size_t batch_size,
                                      const struct DlrmSparseInput *sparse,
                                      size_t num_tables,
                                      const double *labels,
                                      double *loss_out);

/**
 * Stack-distance profile of an access trace.
 */
enum DlrmStatus dlrm_profile_trace(const uint64_t *trace,
                                   size_t len,
                                   struct DlrmTraceProfile **out);

enum DlrmStatus dlrm_profile_load(const char *path, struct DlrmTraceProfile **out);

enum DlrmStatus dlrm_profile_save(const struct DlrmTraceProfile *profile, const char *path);

/**
 * Releases a profile. Null is ignored.
 */
void dlrm_profile_free(struct DlrmTraceProfile *profile);

enum DlrmStatus dlrm_profile_num_unique(const struct DlrmTraceProfile *profile, size_t *out);

/**
 * Probability of stack distance `distance`; 0 marks a first touch.
 */
enum DlrmStatus dlrm_profile_probability(const struct DlrmTraceProfile *profile,
                                         size_t distance,
                                         double *out);

/**
 * First-touch probability used by default when synthesizing a trace of
 * `target_length` accesses from `profile`.
 */
enum DlrmStatus dlrm_profile_default_threshold(const struct DlrmTraceProfile *profile,
                                               size_t target_length,
                                               double *out);

/**
 * New profile whose first-touch probability is raised to at least
 * `min_first_touch`, the rest rescaled to keep a total of 1.
 */
enum DlrmStatus dlrm_profile_adjust(const struct DlrmTraceProfile *profile,
                                    double min_first_touch,
                                    struct DlrmTraceProfile **out);

/**
 * Total-variation distance between two distance distributions.
 */
enum DlrmStatus dlrm_profile_total_variation(const struct DlrmTraceProfile *p,
                                             const struct DlrmTraceProfile *q,
                                             double *out);

/**
 * Writes `length` synthetic accesses drawn from `profile` to `trace_out`.
 */
enum DlrmStatus dlrm_generate_trace(const struct DlrmTraceProfile *profile,
                                    size_t length,
                                    uint64_t seed,
                                    uint64_t *trace_out);

/**
 * Hit rate of an LRU cache holding `capacity` ids over `trace`.
 */
enum DlrmStatus dlrm_lru_hit_rate(const uint64_t *trace, size_t len, size_t capacity, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DLRM_H */

#ifndef PREFDYN_H
#define PREFDYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_MASKED_PAIR = 3,
  PD_STATUS_DEGENERATE_PAIR = 4,
  PD_STATUS_NUMERIC = 5,
  PD_STATUS_IO = 6,
  PD_STATUS_BUFFER_TOO_SMALL = 7,
  PD_STATUS_PANIC = 8,
} PdStatus;

/**
 * Opaque tabular softmax policy.
 */
typedef struct PdPolicy PdPolicy;

/**
 * Opaque preference task.
 */
typedef struct PdTask PdTask;

/**
 * Loss value, `kappa = exp(-loss)` and log-probability gradients.
 */
typedef struct PdLossEval {
  double value;
  double kappa;
  double grad_w;
  double grad_l;
} PdLossEval;

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *pd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pd_version(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void pd_string_free(char *s);

/**
 * Toy task: prompts and responses labeled `1..=n`, utility `exp(-alpha (y-x)^2)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PdStatus pd_task_new_toy(size_t n_prompts,
                              size_t n_responses,
                              double alpha,
                              struct PdTask **out);

/**
 * Task from a row-major `n_prompts x n_responses` utility matrix.
 *
 * # Safety
 * `utility` must point to `n_prompts * n_responses` doubles; `out` must be valid.
 */
enum PdStatus pd_task_from_utilities(const double *utility,
                                     size_t n_prompts,
                                     size_t n_responses,
                                     struct PdTask **out);

/**
 * New task with a fraction `rate` of cells masked out, chosen by `seed`.
 *
 * # Safety
 * `task` must be a live handle; `out` must be valid.
 */
enum PdStatus pd_task_mask(const struct PdTask *task,
                           double rate,
                           uint64_t seed,
                           struct PdTask **out);

/**
 * # Safety
 * `task` must be NULL or a live handle, freed at most once.
 */
void pd_task_free(struct PdTask *task);

/**
 * # Safety
 * `task` must be a live handle; the outputs must be valid.
 */
enum PdStatus pd_task_shape(const struct PdTask *task, size_t *n_prompts, size_t *n_responses);

/**
 * Bradley-Terry probability that `y1` is preferred to `y2` for prompt `x`.
 *
 * # Safety
 * `task` must be a live handle; `out` must be valid.
 */
enum PdStatus pd_task_preference_probability(const struct PdTask *task,
                                             size_t x,
                                             size_t y1,
                                             size_t y2,
                                             double *out);

/**
 * # Safety
 * `out` must be valid.
 */
enum PdStatus pd_policy_new_uniform(size_t n_prompts, size_t n_responses, struct PdPolicy **out);

/**
 * Policy from a row-major `n_prompts x n_responses` logit matrix.
 *
 * # Safety
 * `logits` must point to `n_prompts * n_responses` doubles; `out` must be valid.
 */
enum PdStatus pd_policy_from_logits(const double *logits,
                                    size_t n_prompts,
                                    size_t n_responses,
                                    struct PdPolicy **out);

/**
 * Writes the response distribution of prompt `x` into `buf`.
 *
 * # Safety
 * `policy` must be a live handle; `buf` must hold `len` doubles.
 */
enum PdStatus pd_policy_probs(const struct PdPolicy *policy, size_t x, double *buf, size_t len);

/**
 * # Safety
 * `policy` must be NULL or a live handle, freed at most once.
 */
void pd_policy_free(struct PdPolicy *policy);

/**
 * Evaluates a named loss (`dpo`, `nbdpo-sym`, `bdpo`, ...) on one pair.
 *
 * # Safety
 * `loss` must be a NUL-terminated string; `out` must be valid.
 */
enum PdStatus pd_loss_eval(const char *loss,
                           double beta,
                           double clip_max,
                           double logp_w,
                           double logp_l,
                           double ref_logp_w,
                           double ref_logp_l,
                           struct PdLossEval *out);

/**
 * Closed-form one-epoch DPO probability change `gamma p_i (w_i - sum_j w_j p_j)`.
 *
 * # Safety
 * `probs`, `w` and `out` must each hold `n` doubles.
 */
enum PdStatus pd_prob_update(const double *probs,
                             const double *w,
                             size_t n,
                             double gamma,
                             double *out);

/**
 * Runs one training experiment. `config_json` is a JSON training config;
 * missing fields take their defaults, so `"{}"` is valid. The report JSON is
 * written to `*out`.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be valid.
 */
enum PdStatus pd_train(const char *config_json, char **out);

/**
 * Runs an inequality-check suite and writes a JSON array of reports to
 * `*out`. `*all_passed` is set to 1 when every check passed, else 0.
 *
 * # Safety
 * `suite` must be a NUL-terminated string; `out` and `all_passed` must be valid.
 */
enum PdStatus pd_verify(const char *suite,
                        size_t trials,
                        uint64_t seed,
                        char **out,
                        int32_t *all_passed);

#endif  /* PREFDYN_H */

/* C interface to the caldial dialogue calibration workbench. */

#ifndef CALDIAL_H
#define CALDIAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes mirroring the CLI exit codes.
 */
typedef enum CaldialStatus {
  Ok = 0,
  /**
   * Invalid configuration or argument values.
   */
  ConfigError = 1,
  /**
   * Runtime or numeric failure.
   */
  RuntimeError = 2,
  /**
   * A required pointer argument was null.
   */
  NullArgument = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  InvalidUtf8 = 4,
} CaldialStatus;

/**
 * A loaded model with the vocabulary it was trained against.
 */
typedef struct CaldialModel CaldialModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *caldial_last_error(void);

/**
 * Load a checkpoint plus its vocab file into an opaque handle.
 *
 * # Safety
 * `checkpoint_path` and `vocab_path` must be valid NUL-terminated strings
 * and `out_model` a valid pointer; the handle must be released with
 * [`caldial_model_free`].
 */
enum CaldialStatus caldial_model_load(const char *checkpoint_path,
                                      const char *vocab_path,
                                      struct CaldialModel **out_model);

/**
 * Release a handle from [`caldial_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must come from [`caldial_model_load`] and not be freed twice.
 */
void caldial_model_free(struct CaldialModel *model);

/**
 * Vocabulary size of a loaded model.
 *
 * # Safety
 * `model` must be a live handle from [`caldial_model_load`].
 */
uintptr_t caldial_model_vocab_size(const struct CaldialModel *model);

/**
 * Greedy-decode a reply to `query`. The reply is written to `out_reply`
 * as a NUL-terminated string owned by the caller.
 *
 * # Safety
 * `model` must be a live handle, `query` a valid NUL-terminated string,
 * and `out_reply` a valid pointer. Free the reply with
 * [`caldial_string_free`].
 */
enum CaldialStatus caldial_model_reply(const struct CaldialModel *model,
                                       const char *query,
                                       uintptr_t max_new_tokens,
                                       char **out_reply);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from a caldial function and not be freed twice.
 */
void caldial_string_free(char *s);

/**
 * Expected calibration error of row-major `n x classes` logits against the
 * labels, at the given temperature and bin count.
 *
 * # Safety
 * `logits` must hold `n * classes` doubles, `labels` `n` entries, and
 * `out_ece` must be a valid pointer.
 */
enum CaldialStatus caldial_ece(const double *logits,
                               uintptr_t n,
                               uintptr_t classes,
                               const uintptr_t *labels,
                               double temperature,
                               uintptr_t n_bins,
                               double *out_ece);

/**
 * NLL-minimizing temperature for row-major `n x classes` logits.
 *
 * # Safety
 * Buffer contracts as in [`caldial_ece`]; `out_t` must be valid.
 */
enum CaldialStatus caldial_optimal_temperature(const double *logits,
                                               uintptr_t n,
                                               uintptr_t classes,
                                               const uintptr_t *labels,
                                               double *out_t);

/**
 * Temperature-scaled probabilities of one logit row. `out_probs` receives
 * `classes` entries; the confidence and predicted class are optional
 * (pass null to skip).
 *
 * # Safety
 * `logits` must hold `classes` doubles and `out_probs` room for the same.
 */
enum CaldialStatus caldial_scale_probs(const double *logits,
                                       uintptr_t classes,
                                       double temperature,
                                       double *out_probs,
                                       double *out_confidence,
                                       uintptr_t *out_predicted);

/**
 * Corpus-level BLEU-1 over `n` prediction/reference sentence pairs. The
 * sentences are tokenized with the library tokenizer.
 *
 * # Safety
 * `predictions` and `references` must each hold `n` valid NUL-terminated
 * strings; `out_score` must be valid.
 */
enum CaldialStatus caldial_bleu1(const char *const *predictions,
                                 const char *const *references,
                                 uintptr_t n,
                                 double *out_score);

/**
 * Exact-match METEOR of one prediction/reference pair, tokenized with the
 * library tokenizer.
 *
 * # Safety
 * Both strings must be valid and NUL-terminated; `out_score` must be valid.
 */
enum CaldialStatus caldial_meteor(const char *prediction, const char *reference, double *out_score);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CALDIAL_H */

#ifndef SPAFIT_H
#define SPAFIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpafitStatus {
  SPAFIT_STATUS_OK = 0,
  SPAFIT_STATUS_NULL_POINTER = 1,
  SPAFIT_STATUS_INVALID_ARGUMENT = 2,
  // Malformed plan spec or out-of-range stratification.
  SPAFIT_STATUS_SPEC_ERROR = 3,
  // Adapter does not match the model or its plan.
  SPAFIT_STATUS_INCOMPATIBLE = 4,
  SPAFIT_STATUS_IO = 5,
  // Corrupt or unreadable container contents.
  SPAFIT_STATUS_FORMAT = 6,
  SPAFIT_STATUS_INTERNAL = 7,
} SpafitStatus;

// Opaque model handle.
typedef struct SpafitModel SpafitModel;

// Model dimensions; mirrors the engine's configuration.
typedef struct SpafitModelConfig {
  uint32_t num_layers;
  uint32_t hidden;
  uint32_t num_heads;
  uint32_t ffn_size;
  uint32_t vocab_size;
  uint32_t max_positions;
  uint32_t type_vocab;
  uint32_t lora_rank;
  uint32_t lora_alpha;
  double dropout_p;
  uint32_t num_labels;
} SpafitModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next spafit call on the same thread.
const char *spafit_last_error(void);

// Library version as a static string.
const char *spafit_version(void);

// Fill `out` with a named preset: `"toy"` or `"bert-large"`.
//
// # Safety
// `name` must be a valid C string and `out` writable.
enum SpafitStatus spafit_config_preset(const char *name, struct SpafitModelConfig *out);

// Build a randomly initialised model. Release it with `spafit_model_free`.
//
// # Safety
// `config` must be readable and `out` writable.
enum SpafitStatus spafit_model_new(const struct SpafitModelConfig *config,
                                   uint64_t seed,
                                   struct SpafitModel **out);

// # Safety
// `model` must come from this library and not be used afterwards. Null is ignored.
void spafit_model_free(struct SpafitModel *model);

// # Safety
// `model` must be a live handle and `out` writable.
enum SpafitStatus spafit_model_config(const struct SpafitModel *model,
                                      struct SpafitModelConfig *out);

// Compile `spec` against the model and attach it, creating LoRA factors from `seed`.
//
// # Safety
// `model` must be a live handle and `spec` a valid C string.
enum SpafitStatus spafit_model_attach_plan(struct SpafitModel *model,
                                           const char *spec,
                                           uint64_t seed);

// Trainable parameters of `spec` on `config`, without building weights.
//
// # Safety
// `config` must be readable, `spec` a valid C string and `out` writable.
enum SpafitStatus spafit_count_trainable(const struct SpafitModelConfig *config,
                                         const char *spec,
                                         bool include_head,
                                         uint64_t *out);

// Trainable parameters of the attached plan.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum SpafitStatus spafit_model_count_trainable(const struct SpafitModel *model,
                                               bool include_head,
                                               uint64_t *out);

// Eval-mode logits for a `batch × seq` block of token ids.
//
// `type_ids` and `mask` may be null (all zeros and all ones). `out` receives
// `batch × num_labels` values and `out_len` must be at least that.
//
// # Safety
// Non-null arrays must hold `batch × seq` elements; `out` must hold `out_len`.
enum SpafitStatus spafit_model_forward(const struct SpafitModel *model,
                                       const uint32_t *token_ids,
                                       const uint32_t *type_ids,
                                       const uint8_t *mask,
                                       size_t batch,
                                       size_t seq,
                                       double *out,
                                       size_t out_len);

// # Safety
// `model` must be a live handle and `path` a valid C string.
enum SpafitStatus spafit_model_save(const struct SpafitModel *model, const char *path);

// # Safety
// `path` must be a valid C string and `out` writable.
enum SpafitStatus spafit_model_load(const char *path, struct SpafitModel **out);

// Write the trainable tensors of the attached plan as an adapter file.
//
// # Safety
// `model` must be a live handle and `path` a valid C string.
enum SpafitStatus spafit_model_export_adapter(const struct SpafitModel *model, const char *path);

// Replace the trainable tensors with an adapter's. The model is unchanged on failure.
//
// # Safety
// `model` must be a live handle and `path` a valid C string.
enum SpafitStatus spafit_model_swap_adapter(struct SpafitModel *model, const char *path);

// # Safety
// `pred` and `gold` must hold `n` elements; `out` must be writable.
enum SpafitStatus spafit_accuracy(const uint32_t *pred,
                                  const uint32_t *gold,
                                  size_t n,
                                  double *out);

// Binary F1 with class 1 positive.
//
// # Safety
// `pred` and `gold` must hold `n` elements; `out` must be writable.
enum SpafitStatus spafit_f1(const uint32_t *pred, const uint32_t *gold, size_t n, double *out);

// # Safety
// `pred` and `gold` must hold `n` elements; `out` must be writable.
enum SpafitStatus spafit_mcc(const uint32_t *pred, const uint32_t *gold, size_t n, double *out);

// # Safety
// `pred` and `gold` must hold `n` elements; `out` must be writable.
enum SpafitStatus spafit_pearson(const double *pred, const double *gold, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPAFIT_H */

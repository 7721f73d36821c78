#ifndef DPGDIFF_H
#define DPGDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of the C interface.
typedef enum DpgStatus {
  DPG_STATUS_OK = 0,
  DPG_STATUS_NULL_POINTER = 1,
  DPG_STATUS_INVALID_UTF8 = 2,
  DPG_STATUS_IO = 3,
  DPG_STATUS_PARSE = 4,
  DPG_STATUS_CHECKPOINT = 5,
  DPG_STATUS_INVALID_ARGUMENT = 6,
  DPG_STATUS_INDEX_OUT_OF_RANGE = 7,
  DPG_STATUS_NON_FINITE = 8,
  DPG_STATUS_BUFFER_TOO_SMALL = 9,
  DPG_STATUS_INTERNAL = 10,
} DpgStatus;

// Opaque handle to a loaded model.
typedef struct DpgModel DpgModel;

// Sampled ranking metrics in `[0, 1]`.
typedef struct DpgMetrics {
  double mrr;
  double ndcg5;
  double ndcg10;
  double hr5;
  double hr10;
  uintptr_t n_users;
} DpgMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *dpg_last_error(void);

// Library version as a static NUL-terminated string.
const char *dpg_version(void);

// Loads the checkpoint directory `path`. With `best` set, the best
// validated parameters are used when present.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum DpgStatus dpg_model_load(const char *path, bool best, struct DpgModel **out);

// Releases a handle from [`dpg_model_load`]; null is ignored.
//
// # Safety
// `model` must come from [`dpg_model_load`] and not be used afterwards.
void dpg_model_free(struct DpgModel *model);

// Embedding-table rows of a domain (0 = X, 1 = Y), including the two
// reserved rows; 0 for a null handle or an unknown domain.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t dpg_model_table_size(const struct DpgModel *model, uint8_t domain);

// Number of reverse diffusion steps of a full pass; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
uintptr_t dpg_model_diffusion_steps(const struct DpgModel *model);

// Scores every row of the target domain's table for one history.
//
// `items[i]` and `domains[i]` describe the i-th interaction, oldest first.
// `n_steps = 0` runs the full reverse schedule. The output buffer must hold
// [`dpg_model_table_size`] entries; reserved rows receive 0.
//
// # Safety
// Pointers must be valid for the given lengths.
enum DpgStatus dpg_model_score(const struct DpgModel *model,
                               const uintptr_t *items,
                               const uint8_t *domains,
                               uintptr_t len,
                               uint8_t target_domain,
                               uintptr_t n_steps,
                               uint64_t seed,
                               uintptr_t user_index,
                               double *out_scores,
                               uintptr_t out_len);

// Aggregates 1-based ranks of the positive items into metrics.
//
// # Safety
// `ranks` must be valid for `n` reads and `out` writable.
enum DpgStatus dpg_compute_metrics(const uintptr_t *ranks, uintptr_t n, struct DpgMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPGDIFF_H */

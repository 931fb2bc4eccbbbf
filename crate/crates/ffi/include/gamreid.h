#ifndef GAMREID_H
#define GAMREID_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum GamreidStatus {
  GAMREID_STATUS_OK = 0,
  GAMREID_STATUS_NULL_ARGUMENT = 1,
  GAMREID_STATUS_SHAPE = 2,
  GAMREID_STATUS_CONFIG = 3,
  GAMREID_STATUS_USAGE = 4,
  GAMREID_STATUS_FORMAT = 5,
  GAMREID_STATUS_INTEGRITY = 6,
  GAMREID_STATUS_PARSE = 7,
  GAMREID_STATUS_NUMERIC = 8,
  GAMREID_STATUS_IO = 9,
  GAMREID_STATUS_PANIC = 10,
} GamreidStatus;

/*
 A loaded embedding model.
 */
typedef struct GamreidModel GamreidModel;

/*
 Retrieval scores, fractions in `[0, 1]`.
 */
typedef struct GamreidMetrics {
  double rank1;
  double rank5;
  double rank10;
  double map;
  size_t num_queries;
  /*
   Queries without any valid gallery match.
   */
  size_t num_skipped;
} GamreidMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next call into this library from the same thread.
 */
const char *gamreid_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *gamreid_version(void);

/*
 Analytic parameter count of a preset. `groups` and `embedding_dim` of 0
 keep the preset's values.

 # Safety
 `preset` must be a NUL-terminated string and `out_total` writable.
 */
enum GamreidStatus gamreid_count_params(const char *preset,
                                        size_t groups,
                                        size_t embedding_dim,
                                        uint64_t *out_total);

/*
 Load the model stored in a training checkpoint.

 # Safety
 `path` must be a NUL-terminated string and `out_model` writable. On
 success `*out_model` owns a handle for [`gamreid_model_free`].
 */
enum GamreidStatus gamreid_model_load(const char *path, struct GamreidModel **out_model);

/*
 Release a model. Null is ignored.

 # Safety
 `model` must come from [`gamreid_model_load`] and not be used afterwards.
 */
void gamreid_model_free(struct GamreidModel *model);

/*
 Embedding size D of a model, 0 for null.

 # Safety
 `model` must be null or a live handle.
 */
size_t gamreid_model_embedding_dim(const struct GamreidModel *model);

/*
 Input height and width the model was trained at.

 # Safety
 `model` must be a live handle; the outputs must be writable.
 */
enum GamreidStatus gamreid_model_input_size(const struct GamreidModel *model,
                                            size_t *out_height,
                                            size_t *out_width);

/*
 Embed `n` images laid out as `[n, 3, height, width]` (row-major, values in
 `[0, 1]`) into `out`, which receives `n * D` unit-length rows.

 # Safety
 `images` must hold `n * 3 * height * width` values and `out` `out_len`.
 */
enum GamreidStatus gamreid_model_embed(const struct GamreidModel *model,
                                       const double *images,
                                       size_t n,
                                       size_t height,
                                       size_t width,
                                       double *out,
                                       size_t out_len);

/*
 Rank-1/5/10 and mAP of `nq` queries against `ng` gallery items, all with
 `dim`-wide embedding rows. Same-identity same-camera gallery items and
 identity `-1` are ignored per query.

 # Safety
 Each pointer must reference as many elements as its count implies;
 `out` must be writable.
 */
enum GamreidStatus gamreid_evaluate(const double *query_embeddings,
                                    const int64_t *query_identities,
                                    const uint32_t *query_cameras,
                                    size_t nq,
                                    const double *gallery_embeddings,
                                    const int64_t *gallery_identities,
                                    const uint32_t *gallery_cameras,
                                    size_t ng,
                                    size_t dim,
                                    struct GamreidMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAMREID_H */

#ifndef CLDF_H
#define CLDF_H

#include <stddef.h>
#include <stdint.h>

typedef enum CldfDtype {
  CLDF_DTYPE_F32 = 0,
  CLDF_DTYPE_U8 = 1,
} CldfDtype;

typedef enum CldfLayout {
  CLDF_LAYOUT_HW = 0,
  CLDF_LAYOUT_HWC = 1,
  CLDF_LAYOUT_NHWC = 2,
} CldfLayout;

typedef enum CldfStatus {
  CLDF_STATUS_OK = 0,
  CLDF_STATUS_NULL_POINTER = 1,
  CLDF_STATUS_INVALID_ARGUMENT = 2,
  CLDF_STATUS_IO = 3,
  CLDF_STATUS_FORMAT = 4,
  CLDF_STATUS_SHAPE = 5,
  CLDF_STATUS_COMPUTE = 6,
  CLDF_STATUS_MISSING_INPUT = 7,
  CLDF_STATUS_PANIC = 8,
} CldfStatus;

/**
 * Opaque trained pixel decoder.
 */
typedef struct CldfDecoder CldfDecoder;

/**
 * Opaque `.cldf` tensor.
 */
typedef struct CldfTensor CldfTensor;

typedef struct CldfTensorInfo {
  enum CldfLayout layout;
  enum CldfDtype dtype;
  size_t rank;
  /**
   * Unused trailing entries are zero.
   */
  size_t shape[4];
  size_t len;
} CldfTensorInfo;

typedef struct CldfKMeansParams {
  size_t k;
  size_t restarts;
  size_t max_iter;
  double tol;
} CldfKMeansParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cldf_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the next failing call.
 */
const char *cldf_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CldfStatus cldf_tensor_read(const char *path, struct CldfTensor **out);

/**
 * # Safety
 * `tensor` must come from this library; `path` must be NUL-terminated.
 */
enum CldfStatus cldf_tensor_write(const struct CldfTensor *tensor, const char *path);

/**
 * Copy `len` floats into a new tensor.
 *
 * # Safety
 * `shape` must hold `rank` entries and `data` `len` entries.
 */
enum CldfStatus cldf_tensor_new_f32(enum CldfLayout layout,
                                    const size_t *shape,
                                    size_t rank,
                                    const float *data,
                                    size_t len,
                                    struct CldfTensor **out);

/**
 * # Safety
 * `shape` must hold `rank` entries and `data` `len` entries.
 */
enum CldfStatus cldf_tensor_new_u8(enum CldfLayout layout,
                                   const size_t *shape,
                                   size_t rank,
                                   const uint8_t *data,
                                   size_t len,
                                   struct CldfTensor **out);

/**
 * # Safety
 * `tensor` must come from this library or be NULL.
 */
void cldf_tensor_free(struct CldfTensor *tensor);

/**
 * # Safety
 * Both pointers must be valid.
 */
enum CldfStatus cldf_tensor_info(const struct CldfTensor *tensor, struct CldfTensorInfo *out);

/**
 * Borrow the element buffer of an f32 tensor; valid while the tensor lives.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CldfStatus cldf_tensor_data_f32(const struct CldfTensor *tensor,
                                     const float **data,
                                     size_t *len);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CldfStatus cldf_tensor_data_u8(const struct CldfTensor *tensor,
                                    const uint8_t **data,
                                    size_t *len);

/**
 * Supervised contrastive loss (sum over anchors) of `n` unit-norm embeddings.
 *
 * `grad` may be NULL; otherwise it receives `n * dim` values of dL/dz.
 *
 * # Safety
 * `embeddings` holds `n * dim` floats, `labels` holds `n` bytes, `loss` is valid.
 */
enum CldfStatus cldf_supcon_loss(const float *embeddings,
                                 size_t n,
                                 size_t dim,
                                 const uint8_t *labels,
                                 double tau,
                                 double *loss,
                                 double *grad);

/**
 * # Safety
 * `pred` and `gt` hold `height * width` bytes of 0/1; `out` is valid.
 */
enum CldfStatus cldf_dice(const uint8_t *pred,
                          const uint8_t *gt,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * # Safety
 * `pred` and `gt` hold `height * width` bytes of 0/1; `out` is valid.
 */
enum CldfStatus cldf_iou(const uint8_t *pred,
                         const uint8_t *gt,
                         size_t height,
                         size_t width,
                         double *out);

/**
 * Default k-means settings (k = 2, 10 restarts).
 */
struct CldfKMeansParams cldf_kmeans_default_params(void);

/**
 * Cluster `n` points of dimension `dim`; writes `n` cluster indices.
 *
 * # Safety
 * `points` holds `n * dim` floats, `assignments` has room for `n` entries;
 * `params` and `objective` may be NULL.
 */
enum CldfStatus cldf_kmeans(const float *points,
                            size_t n,
                            size_t dim,
                            const struct CldfKMeansParams *params,
                            uint64_t seed,
                            uint32_t *assignments,
                            double *objective);

/**
 * Load a checkpoint directory written by the training stage.
 *
 * # Safety
 * `dir` must be NUL-terminated and `out` valid.
 */
enum CldfStatus cldf_decoder_load(const char *dir, struct CldfDecoder **out);

/**
 * # Safety
 * `decoder` must come from this library or be NULL.
 */
void cldf_decoder_free(struct CldfDecoder *decoder);

/**
 * # Safety
 * All pointers must be valid.
 */
enum CldfStatus cldf_decoder_dims(const struct CldfDecoder *decoder,
                                  size_t *input_dim,
                                  size_t *output_dim);

/**
 * Embed every pixel of an HWC feature tensor; returns an HWC embedding tensor.
 *
 * # Safety
 * Handles must come from this library; `out` must be valid.
 */
enum CldfStatus cldf_decoder_decode(const struct CldfDecoder *decoder,
                                    const struct CldfTensor *features,
                                    struct CldfTensor **out);

/**
 * Decode, cluster into two groups and label the group holding the seed
 * foreground. `seeds` is the u8 HW label image (1 foreground, 2 background).
 * `params` may be NULL for the defaults.
 *
 * # Safety
 * Handles must come from this library; `out` must be valid.
 */
enum CldfStatus cldf_infer_mask(const struct CldfDecoder *decoder,
                                const struct CldfTensor *features,
                                const struct CldfTensor *seeds,
                                const struct CldfKMeansParams *params,
                                uint64_t seed,
                                struct CldfTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLDF_H */

#ifndef SYNCGEN_H
#define SYNCGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_INVALID_ARGUMENT = 1,
  SG_STATUS_NULL_POINTER = 2,
  SG_STATUS_INCOMPATIBLE = 3,
  SG_STATUS_NUMERIC_FAILURE = 4,
  SG_STATUS_IO = 5,
  SG_STATUS_FORMAT = 6,
  SG_STATUS_NO_SAMPLES = 7,
  SG_STATUS_UNDEFINED = 8,
  // The output buffer is too short; the required length was written.
  SG_STATUS_BUFFER_TOO_SMALL = 9,
  SG_STATUS_PANIC = 10,
} SgStatus;

// Fitted residual codebooks.
typedef struct SgCodebooks SgCodebooks;

// Model parameters loaded from a checkpoint.
typedef struct SgModel SgModel;

// Sampling settings for [`sg_generate`].
typedef struct SgSampleParams {
  double gamma;
  double temperature;
  // 0 disables top-k filtering.
  uint32_t top_k;
  uint64_t seed;
  double duration_s;
  uint32_t sample_rate;
} SgSampleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sg_version(void);

// Message of the last failure on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *sg_last_error_message(void);

struct SgSampleParams sg_sample_params_default(void);

// # Safety
// `path_c` must be a NUL-terminated string and `out_handle` writable.
enum SgStatus sg_codebooks_read(const char *path_c, struct SgCodebooks **out_handle);

// # Safety
// `handle` must come from [`sg_codebooks_read`] and not be used afterwards.
void sg_codebooks_free(struct SgCodebooks *handle);

// # Safety
// `handle` must be live; the output pointers writable.
enum SgStatus sg_codebooks_shape(const struct SgCodebooks *handle,
                                 size_t *k,
                                 size_t *n_q,
                                 size_t *frame_len);

// Encode-decode SNR in dB of a mono signal.
//
// # Safety
// `samples` must hold `len` floats; `handle` must be live.
enum SgStatus sg_codec_roundtrip_snr(const struct SgCodebooks *handle,
                                     const float *samples,
                                     size_t len,
                                     uint32_t sample_rate,
                                     double *out_db);

// # Safety
// `path_c` must be a NUL-terminated string and `out_handle` writable.
enum SgStatus sg_model_read(const char *path_c, struct SgModel **out_handle);

// # Safety
// `handle` must come from [`sg_model_read`] and not be used afterwards.
void sg_model_free(struct SgModel *handle);

// # Safety
// `handle` must be live and `out_count` writable.
enum SgStatus sg_model_parameter_count(const struct SgModel *handle, size_t *out_count);

// Generates audio for a row-major `t_v` x `d_raw` feature matrix. When
// `capacity` is too small nothing is copied, `out_len` receives the
// required length and `BufferTooSmall` is returned.
//
// # Safety
// Handles must be live, `video` must hold `t_v * d_raw` floats and
// `out_samples` `capacity` floats.
enum SgStatus sg_generate(const struct SgModel *model,
                          const struct SgCodebooks *books,
                          const float *video,
                          size_t t_v,
                          size_t d_raw,
                          double fps,
                          const struct SgSampleParams *params,
                          float *out_samples,
                          size_t capacity,
                          size_t *out_len);

// Guidance mix of two log-softmax vectors of length `n`, renormalized.
//
// # Safety
// All three pointers must hold `n` doubles.
enum SgStatus sg_cfg_mix(const double *logp_cond,
                         const double *logp_uncond,
                         size_t n,
                         double gamma,
                         double *out_scores);

// # Safety
// `p` and `q` must hold `n` doubles.
enum SgStatus sg_kl_divergence(const double *p, const double *q, size_t n, double *out_kl);

// Fréchet distance between two row-major sets of `dim`-vectors.
//
// # Safety
// `a` must hold `n_a * dim` doubles and `b` `n_b * dim`.
enum SgStatus sg_frechet_distance(const double *a,
                                  size_t n_a,
                                  const double *b,
                                  size_t n_b,
                                  size_t dim,
                                  double *out_fd);

// Offset of `samples` against reference onsets at `event_times` (seconds).
//
// # Safety
// `samples` must hold `len` floats and `event_times` `n_events` doubles.
enum SgStatus sg_estimate_offset(const float *samples,
                                 size_t len,
                                 uint32_t sample_rate,
                                 const double *event_times,
                                 size_t n_events,
                                 double *out_offset_ms,
                                 size_t *out_class);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNCGEN_H */

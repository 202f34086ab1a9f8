#ifndef FLOWEDIT_H
#define FLOWEDIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FeStatus {
  FE_STATUS_OK = 0,
  FE_STATUS_NULL_POINTER = 1,
  FE_STATUS_INVALID_UTF8 = 2,
  FE_STATUS_BUFFER_SIZE = 3,
  FE_STATUS_MISSING_FILE = 10,
  FE_STATUS_IO = 11,
  FE_STATUS_DIGEST = 12,
  FE_STATUS_FORMAT = 13,
  FE_STATUS_CONFIG = 20,
  FE_STATUS_VALIDATION = 21,
  FE_STATUS_UNKNOWN_ATTRIBUTE = 22,
  FE_STATUS_UNKNOWN_WORD = 23,
  FE_STATUS_NOT_FOUND = 24,
  FE_STATUS_SOLVER = 30,
  FE_STATUS_DIVERGED = 31,
  FE_STATUS_UNAVAILABLE = 40,
  FE_STATUS_INTERNAL = 41,
  FE_STATUS_PANIC = 42,
} FeStatus;

// Opaque engine handle.
typedef struct FeEngine FeEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message (NUL terminated, truncated
// to `cap`) and returns its full length in bytes.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t fe_last_error(char *buf, size_t cap);

// Loads a checkpoint and an optional direction bank (`bank_path` may be null).
//
// # Safety
// Paths must be null or NUL-terminated strings; `out` must be writable.
enum FeStatus fe_engine_load(const char *checkpoint_path,
                             const char *bank_path,
                             struct FeEngine **out);

// Releases a handle from [`fe_engine_load`]. Null is ignored.
//
// # Safety
// `engine` must come from `fe_engine_load` and not be used afterwards.
void fe_engine_free(struct FeEngine *engine);

// Number of floats in one latent, or 0 for a null handle.
//
// # Safety
// `engine` must be null or a live handle.
size_t fe_engine_latent_len(const struct FeEngine *engine);

// Number of attributes in the loaded bank.
//
// # Safety
// `engine` must be null or a live handle.
size_t fe_engine_attribute_count(const struct FeEngine *engine);

// Generates `count` samples from seeds `seed..seed + count` into `out`
// (`count * latent_len` floats). `prompt` and `solver` may be null for the
// empty prompt and dopri5.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum FeStatus fe_sample(const struct FeEngine *engine,
                        uint64_t seed,
                        size_t count,
                        const char *prompt,
                        const char *solver_name,
                        float *out,
                        size_t out_len);

// Inverts one latent (`latent_len` floats) back to noise.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum FeStatus fe_invert(const struct FeEngine *engine,
                        const float *image,
                        size_t image_len,
                        const char *prompt,
                        const char *solver_name,
                        float *out,
                        size_t out_len);

// Edits the sample of `seed` with `n_attrs` attribute offsets
// (`names[i]` with weight `weights[i]`) applied for `0 < t < t_edit`.
// Writes the edited latent to `out` and, when non-null, the relative change
// against the unedited sample to `relative_error`.
//
// # Safety
// `names` and `weights` must hold `n_attrs` entries; buffers must be valid.
enum FeStatus fe_edit(const struct FeEngine *engine,
                      uint64_t seed,
                      const char *prompt,
                      const char *const *names,
                      const double *weights,
                      size_t n_attrs,
                      double t_edit,
                      const char *solver_name,
                      float *out,
                      size_t out_len,
                      double *relative_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWEDIT_H */

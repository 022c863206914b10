#ifndef EFPN_H
#define EFPN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum EfpnStatus {
  EFPN_STATUS_OK = 0,
  // A required pointer argument was null.
  EFPN_STATUS_NULL_POINTER = 1,
  // A string was not UTF-8, a size was zero, or an output buffer was too small.
  EFPN_STATUS_INVALID_ARGUMENT = 2,
  // Invalid configuration or incorrect use of the API.
  EFPN_STATUS_CONFIG = 3,
  // Unreadable, corrupt or mis-shaped input.
  EFPN_STATUS_DATA = 4,
  // Non-finite values during computation.
  EFPN_STATUS_NUMERIC = 5,
  // An internal panic was caught at the boundary.
  EFPN_STATUS_PANIC = 6,
} EfpnStatus;

// Opaque model handle.
typedef struct EfpnModelHandle EfpnModelHandle;

// Library version as a static NUL-terminated string.
const char *efpn_version(void);

// Message for the most recent failure on this thread, or null if the last
// call succeeded. Valid until the next call into this library on the same
// thread.
const char *efpn_last_error_message(void);

// Builds the default configuration with weights drawn from `seed`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum EfpnStatus efpn_model_build_default(uint64_t seed, struct EfpnModelHandle **out);

// Builds a model from the JSON form of a model configuration.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` as for
// [`efpn_model_build_default`].
enum EfpnStatus efpn_model_build_json(const char *config_json,
                                      uint64_t seed,
                                      struct EfpnModelHandle **out);

// Loads a checkpoint written by `efpn_model_save` or the `efpn` tool.
//
// # Safety
// `path` must be a NUL-terminated string; `out` as for
// [`efpn_model_build_default`].
enum EfpnStatus efpn_model_load(const char *path, struct EfpnModelHandle **out);

// Writes the model to `path` as a checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum EfpnStatus efpn_model_save(const struct EfpnModelHandle *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void efpn_model_free(struct EfpnModelHandle *model);

// Number of trainable parameters.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum EfpnStatus efpn_model_param_count(const struct EfpnModelHandle *model, uint64_t *out);

// Forward-pass FLOPs for a square input of side `input_size`.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum EfpnStatus efpn_model_flop_count(const struct EfpnModelHandle *model,
                                      size_t input_size,
                                      uint64_t *out);

// Number of output classes, background included.
//
// # Safety
// `model` must be a live handle; `out` writable.
enum EfpnStatus efpn_model_num_classes(const struct EfpnModelHandle *model, size_t *out);

// Segments one interleaved RGB8 image of `height` x `width` pixels.
// Writes one class index per pixel, row-major, into `mask_out`, which must
// hold `mask_len >= height * width` bytes.
//
// # Safety
// `model` must be a live handle; `rgb` must point to `height * width * 3`
// readable bytes; `mask_out` to `mask_len` writable bytes.
enum EfpnStatus efpn_model_predict(const struct EfpnModelHandle *model,
                                   const uint8_t *rgb,
                                   size_t height,
                                   size_t width,
                                   uint8_t *mask_out,
                                   size_t mask_len);

#endif  /* EFPN_H */

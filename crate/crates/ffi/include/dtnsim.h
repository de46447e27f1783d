#ifndef DTNSIM_H
#define DTNSIM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DtnStatus {
  DTN_STATUS_OK = 0,
  DTN_STATUS_NULL_POINTER = 1,
  DTN_STATUS_INVALID_UTF8 = 2,
  DTN_STATUS_INVALID_ARGUMENT = 3,
  DTN_STATUS_NOT_FOUND = 4,
  DTN_STATUS_INTEGRITY = 5,
  DTN_STATUS_ENGINE = 6,
  DTN_STATUS_BUFFER_TOO_SMALL = 7,
  DTN_STATUS_PANIC = 8,
} DtnStatus;

// Opaque simulation engine.
typedef struct DtnEngine DtnEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Length of the base64 ciphertext for a plaintext of `plaintext_len` bytes.
size_t dtn_encrypted_size(size_t plaintext_len);

// Copies the last error message of this thread as NUL-terminated text.
//
// # Safety
// `buf` must be valid for `cap` bytes or null; `needed` must be valid or null.
enum DtnStatus dtn_last_error(char *buf, size_t cap, size_t *needed);

// Engine for a built-in profile (`E1`, `E4`, `E5`) with its injections scheduled.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be valid for writes.
enum DtnStatus dtn_engine_new_profile(const char *name, struct DtnEngine **out);

// Engine for a scenario given as TOML text.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be valid for writes.
enum DtnStatus dtn_engine_new_toml(const char *toml, struct DtnEngine **out);

// # Safety
// `engine` must come from `dtn_engine_new_*` and not be used afterwards.
void dtn_engine_free(struct DtnEngine *engine);

// Advances the engine by `ticks` steps.
//
// # Safety
// `engine` must be a live handle.
enum DtnStatus dtn_engine_step(struct DtnEngine *engine, uint64_t ticks);

// Runs until every bundle settles or the scenario duration ends.
//
// # Safety
// `engine` must be a live handle.
enum DtnStatus dtn_engine_run(struct DtnEngine *engine);

// Seconds of virtual time since the scenario start.
//
// # Safety
// `engine` must be a live handle or null (returns a negative value).
double dtn_engine_elapsed_s(const struct DtnEngine *engine);

// Creates a bundle at `source` now and writes its id (NUL-terminated).
// `priority` is 0 bulk, 1 normal, 2 expedited. When `id_cap` is below the
// worst-case id length nothing is created and `needed` receives that bound.
//
// # Safety
// String arguments must be NUL-terminated; `data` must be valid for `len`
// bytes; `id_buf` for `id_cap` bytes or null; `needed` valid or null.
enum DtnStatus dtn_engine_submit(struct DtnEngine *engine,
                                 const char *source,
                                 const char *destination,
                                 const uint8_t *data,
                                 size_t len,
                                 uint32_t priority,
                                 bool custody,
                                 char *id_buf,
                                 size_t id_cap,
                                 size_t *needed);

// Writes the run metrics as JSON text (NUL-terminated).
//
// # Safety
// `engine` must be a live handle; `buf` valid for `cap` bytes or null.
enum DtnStatus dtn_engine_metrics_json(struct DtnEngine *engine,
                                       char *buf,
                                       size_t cap,
                                       size_t *needed);

// Verifies and decrypts bundle `bundle_id` delivered at `node`.
//
// # Safety
// String arguments must be NUL-terminated; `buf` valid for `cap` bytes or null.
enum DtnStatus dtn_engine_decrypt(struct DtnEngine *engine,
                                  const char *node,
                                  const char *bundle_id,
                                  uint8_t *buf,
                                  size_t cap,
                                  size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DTNSIM_H */

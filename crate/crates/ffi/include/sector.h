#ifndef SECTOR_FFI_H
#define SECTOR_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SectorStatus {
  SECTOR_STATUS_OK = 0,
  SECTOR_STATUS_NULL_ARGUMENT = 1,
  SECTOR_STATUS_INVALID_UTF8 = 2,
  SECTOR_STATUS_INVALID_ARGUMENT = 3,
  SECTOR_STATUS_IO = 4,
  SECTOR_STATUS_REMOTE = 5,
  /**
   * The job ran but some segments failed; the report is still returned.
   */
  SECTOR_STATUS_JOB_FAILED = 6,
  /**
   * A scenario finished but diverged from the reference.
   */
  SECTOR_STATUS_MISMATCH = 7,
  SECTOR_STATUS_PANIC = 8,
} SectorStatus;

/**
 * A logged-in client session.
 */
typedef struct SectorClient SectorClient;

/**
 * Bytes owned by the library.
 */
typedef struct SectorBuffer {
  uint8_t *data;
  size_t len;
} SectorBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *sector_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library on this thread.
 */
const char *sector_last_error(void);

/**
 * Connects to the master at `master` ("host:port") and logs in.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings and `out` a valid
 * pointer. The handle written to `out` must be released with
 * [`sector_client_free`].
 */
enum SectorStatus sector_client_connect(const char *master,
                                        const char *psk_hex,
                                        const char *user,
                                        const char *password,
                                        struct SectorClient **out);

/**
 * Stops the client and releases the handle. Null is ignored.
 *
 * # Safety
 * `c` must be null or a handle from [`sector_client_connect`] not yet freed.
 */
void sector_client_free(struct SectorClient *c);

/**
 * Stores `len` bytes at `path`.
 *
 * # Safety
 * `c` must be a live handle, `path` a NUL-terminated string and `data` valid
 * for `len` bytes (it may be null when `len` is 0).
 */
enum SectorStatus sector_client_upload(struct SectorClient *c,
                                       const char *path,
                                       const uint8_t *data,
                                       size_t len);

/**
 * Reads the file at `path` into a buffer released with [`sector_buffer_free`].
 *
 * # Safety
 * `c` must be a live handle, `path` a NUL-terminated string and `out` valid.
 */
enum SectorStatus sector_client_download(struct SectorClient *c,
                                         const char *path,
                                         struct SectorBuffer *out);

/**
 * Writes a JSON array of the paths matching `pattern` to `out_json`.
 *
 * # Safety
 * `c` must be a live handle, `pattern` a NUL-terminated string and `out_json`
 * valid. The string is released with [`sector_string_free`].
 */
enum SectorStatus sector_client_list(struct SectorClient *c, const char *pattern, char **out_json);

/**
 * Runs `udf` over every file matching `input`. `buckets` of 0 keeps output
 * local to each engine. The JSON job report is written to `out_json` even
 * when segments failed.
 *
 * # Safety
 * `c` must be a live handle, strings NUL-terminated and `out_json` valid.
 * The string is released with [`sector_string_free`].
 */
enum SectorStatus sector_client_submit(struct SectorClient *c,
                                       const char *input,
                                       const char *udf,
                                       uint32_t buckets,
                                       bool per_file,
                                       char **out_json);

/**
 * Runs a TOML scenario on the simulated cluster and writes the JSON report.
 *
 * # Safety
 * `scenario_toml` must be NUL-terminated and `out_json` valid. The string is
 * released with [`sector_string_free`].
 */
enum SectorStatus sector_harness_run(const char *scenario_toml, char **out_json);

/**
 * Generates `bytes` of sort records for `node`, as the data generator does.
 *
 * # Safety
 * `out` must be valid. The buffer is released with [`sector_buffer_free`].
 */
enum SectorStatus sector_gensort(size_t node,
                                 uint64_t bytes,
                                 uint64_t seed,
                                 struct SectorBuffer *out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void sector_string_free(char *s);

/**
 * # Safety
 * `buf` must come from this library and not have been freed.
 */
void sector_buffer_free(struct SectorBuffer buf);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SECTOR_FFI_H */

#ifndef TEEKV_H
#define TEEKV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdint.h>
#include <stddef.h>

#define TEEKV_SUCCESS 0

#define TEEKV_ERROR_GENERIC 4294901760

#define TEEKV_ERROR_ACCESS_DENIED 4294901761

#define TEEKV_ERROR_ACCESS_CONFLICT 4294901763

#define TEEKV_ERROR_BAD_PARAMETERS 4294901766

#define TEEKV_ERROR_BAD_STATE 4294901767

#define TEEKV_ERROR_ITEM_NOT_FOUND 4294901768

#define TEEKV_ERROR_OUT_OF_MEMORY 4294901772

#define TEEKV_ERROR_COMMUNICATION 4294901774

#define TEEKV_ERROR_SECURITY 4294901775

#define TEEKV_ERROR_SHORT_BUFFER 4294901776

#define TEEKV_ERROR_TARGET_DEAD 4294914084

#define TEEKV_ERROR_STORAGE_NO_SPACE 4294914113

#define TEEKV_ERROR_CORRUPT_OBJECT 4027580417

#define TEEKV_PARAM_NONE 0

#define TEEKV_PARAM_VALUE 1

#define TEEKV_PARAM_MEMREF 2

#define TEEKV_DIR_IN 0

#define TEEKV_DIR_OUT 1

#define TEEKV_DIR_INOUT 2

#define TEEKV_SHM_WHOLE 0

#define TEEKV_SHM_TEMPORARY 1

#define TEEKV_MAX_PARAMS 4

/**
 * Opaque client: an emulated TEE plus the handles opened through it.
 */
typedef struct TeekvClient TeekvClient;

/**
 * One command parameter. For `TEEKV_PARAM_VALUE` only `a` and `b` are
 * used and are updated in place after the call; for `TEEKV_PARAM_MEMREF`
 * `region`, `offset`, `length` and `direction` describe the reference.
 * `TEEKV_PARAM_NONE` entries are skipped.
 */
typedef struct TeekvParam {
  uint32_t kind;
  uint32_t a;
  uint32_t b;
  uint32_t direction;
  uint64_t region;
  uint64_t offset;
  uint64_t length;
} TeekvParam;

/**
 * Creates an emulated TEE with the built-in TAs and a client bound to it.
 * `store_root` may be null for a private temporary directory.
 *
 * # Safety
 * `store_root` is null or a NUL-terminated string; `out_client` is valid
 * for writes.
 */
uint32_t teekv_client_new(const char *store_root, struct TeekvClient **out_client);

/**
 * Finalizes every open context and frees the client. Null is ignored.
 *
 * # Safety
 * `c` is null or was returned by `teekv_client_new` and not yet freed.
 */
void teekv_client_free(struct TeekvClient *c);

/**
 * Opens a context on `device` (null for the default device).
 *
 * # Safety
 * `c` is a live client; `device` is null or NUL-terminated; `out_ctx` is
 * valid for writes.
 */
uint32_t teekv_context_open(const struct TeekvClient *c, const char *device, uint64_t *out_ctx);

/**
 * Finalizes a context together with its sessions and regions.
 *
 * # Safety
 * `c` is a live client.
 */
uint32_t teekv_context_close(const struct TeekvClient *c, uint64_t ctx);

/**
 * Opens a session to the TA with the given 16-byte UUID.
 *
 * # Safety
 * `c` is a live client; `uuid` points to 16 bytes; `out_session` is valid
 * for writes.
 */
uint32_t teekv_session_open(const struct TeekvClient *c,
                            uint64_t ctx,
                            const uint8_t *uuid,
                            uint64_t *out_session);

/**
 * # Safety
 * `c` is a live client.
 */
uint32_t teekv_session_close(const struct TeekvClient *c, uint64_t session);

/**
 * Allocates a zero-filled region of `kind` `TEEKV_SHM_WHOLE` or
 * `TEEKV_SHM_TEMPORARY`.
 *
 * # Safety
 * `c` is a live client; `out_region` is valid for writes.
 */
uint32_t teekv_shm_alloc(const struct TeekvClient *c,
                         uint64_t ctx,
                         size_t size,
                         uint32_t kind,
                         uint64_t *out_region);

/**
 * Copies `len` bytes from `data` into the region at `offset`.
 *
 * # Safety
 * `c` is a live client; `data` is valid for `len` reads.
 */
uint32_t teekv_shm_write(const struct TeekvClient *c,
                         uint64_t region,
                         size_t offset,
                         const uint8_t *data,
                         size_t len);

/**
 * Copies `len` bytes at `offset` out of the region into `buf`.
 *
 * # Safety
 * `c` is a live client; `buf` is valid for `len` writes.
 */
uint32_t teekv_shm_read(const struct TeekvClient *c,
                        uint64_t region,
                        size_t offset,
                        uint8_t *buf,
                        size_t len);

/**
 * # Safety
 * `c` is a live client.
 */
uint32_t teekv_shm_release(const struct TeekvClient *c, uint64_t region);

/**
 * Invokes `command` on a session. Returns the TA's result code; value
 * parameters are updated in place.
 *
 * # Safety
 * `c` is a live client; `params` is valid for `n` reads and writes (or
 * null when `n` is 0).
 */
uint32_t teekv_invoke(const struct TeekvClient *c,
                      uint64_t session,
                      uint32_t command,
                      struct TeekvParam *params,
                      size_t n);

/**
 * Boundary counters of the client's TEE.
 *
 * # Safety
 * `c` is a live client; the output pointers are valid for writes.
 */
uint32_t teekv_stats(const struct TeekvClient *c,
                     uint64_t *world_switches,
                     uint64_t *supplicant_rpcs);

/**
 * SSK = HMAC-SHA256(huk, "ssk-derivation-v1").
 *
 * # Safety
 * `huk` points to 32 readable bytes, `out_ssk` to 32 writable bytes.
 */
uint32_t teekv_derive_ssk(const uint8_t *huk, uint8_t *out_ssk);

/**
 * TSK = HMAC-SHA256(SSK(huk), uuid).
 *
 * # Safety
 * `huk` points to 32 readable bytes, `uuid` to 16, `out_tsk` to 32
 * writable bytes.
 */
uint32_t teekv_derive_tsk(const uint8_t *huk, const uint8_t *uuid, uint8_t *out_tsk);

/**
 * Copies the built-in key-value TA's UUID into `out_uuid` (16 bytes).
 *
 * # Safety
 * `out_uuid` is valid for 16 writes.
 */
uint32_t teekv_kv_ta_uuid(uint8_t *out_uuid);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `len`, into `buf`. Returns the full message length.
 *
 * # Safety
 * `buf` is null or valid for `len` writes.
 */
size_t teekv_last_error(char *buf, size_t len);

#endif /* TEEKV_H */

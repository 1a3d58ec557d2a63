#include <stdio.h>
#include <string.h>
#include "teekv.h"

#define CHECK(expr, want)                                                        \
    do {                                                                         \
        uint32_t rc_ = (expr);                                                   \
        if (rc_ != (want)) {                                                     \
            char msg[256];                                                       \
            teekv_last_error(msg, sizeof msg);                                   \
            fprintf(stderr, "%s: 0x%08x (%s)\n", #expr, rc_, msg);              \
            return 1;                                                            \
        }                                                                        \
    } while (0)

int main(void) {
    TeekvClient *c = NULL;
    uint64_t ctx, sess, shm;
    uint8_t uuid[16], buf[32];
    const char *msg = "hello from the normal world";

    CHECK(teekv_client_new(NULL, &c), TEEKV_SUCCESS);
    CHECK(teekv_kv_ta_uuid(uuid), TEEKV_SUCCESS);
    CHECK(teekv_context_open(c, NULL, &ctx), TEEKV_SUCCESS);
    CHECK(teekv_session_open(c, ctx, uuid, &sess), TEEKV_SUCCESS);
    CHECK(teekv_shm_alloc(c, ctx, 64, TEEKV_SHM_WHOLE, &shm), TEEKV_SUCCESS);
    CHECK(teekv_shm_write(c, shm, 0, (const uint8_t *)msg, strlen(msg)), TEEKV_SUCCESS);

    TeekvParam put[2] = {
        {.kind = TEEKV_PARAM_VALUE, .a = 42},
        {.kind = TEEKV_PARAM_MEMREF, .region = shm, .offset = 0, .length = strlen(msg), .direction = TEEKV_DIR_IN},
    };
    CHECK(teekv_invoke(c, sess, 0, put, 2), TEEKV_SUCCESS);

    TeekvParam get[3] = {
        {.kind = TEEKV_PARAM_VALUE, .a = 42},
        {.kind = TEEKV_PARAM_MEMREF, .region = shm, .offset = 32, .length = 32, .direction = TEEKV_DIR_OUT},
        {.kind = TEEKV_PARAM_VALUE, .a = 0, .b = 32},
    };
    CHECK(teekv_invoke(c, sess, 1, get, 3), TEEKV_SUCCESS);
    if (get[2].b != strlen(msg)) {
        fprintf(stderr, "length %u\n", get[2].b);
        return 1;
    }
    CHECK(teekv_shm_read(c, shm, 32, buf, get[2].b), TEEKV_SUCCESS);
    if (memcmp(buf, msg, strlen(msg)) != 0) {
        fprintf(stderr, "value mismatch\n");
        return 1;
    }

    TeekvParam miss[1] = {{.kind = TEEKV_PARAM_VALUE, .a = 43}};
    CHECK(teekv_invoke(c, sess, 2, miss, 1), TEEKV_ERROR_ITEM_NOT_FOUND);

    CHECK(teekv_context_close(c, ctx), TEEKV_SUCCESS);
    teekv_client_free(c);
    printf("smoke ok\n");
    return 0;
}

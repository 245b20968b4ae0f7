#ifndef QERL_H
#define QERL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define QERL_OK 0

/**
 * A required pointer was NULL.
 */
#define QERL_ERR_NULL -1

/**
 * A scalar argument was out of range (unknown format id, zero dims, …).
 */
#define QERL_ERR_INVALID_ARG -2

/**
 * The codec rejected the input (e.g. a non-finite weight).
 */
#define QERL_ERR_QUANT -3

/**
 * A serialized container failed to parse.
 */
#define QERL_ERR_CORRUPT -4

/**
 * The output buffer is too small; the needed size was written back.
 */
#define QERL_ERR_BUFFER_TOO_SMALL -5

/**
 * A Rust panic was caught at the boundary.
 */
#define QERL_ERR_PANIC -99

#define QERL_FORMAT_INT4 0

#define QERL_FORMAT_FP4 1

#define QERL_FORMAT_NVFP4 2

#define QERL_FORMAT_MXFP4 3

#define QERL_FORMAT_NF4 4

#define QERL_DECAY_EXPONENTIAL 0

#define QERL_DECAY_LINEAR 1

#define QERL_DECAY_COSINE 2

#define QERL_DECAY_LOGARITHMIC 3

/**
 * A quantized matrix.
 */
typedef struct QerlTensor QerlTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next qerl call on the same thread.
 */
const char *qerl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qerl_version(void);

/**
 * Quantizes a row-major `rows x cols` matrix. On success `*out` owns a new
 * handle.
 *
 * # Safety
 * `data` must point to `rows * cols` doubles and `out` must be writable.
 */
int32_t qerl_quantize(const double *data,
                      size_t rows,
                      size_t cols,
                      int32_t format,
                      struct QerlTensor **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `t` must come from this library and not be freed twice.
 */
void qerl_tensor_free(struct QerlTensor *t);

/**
 * Shape and format id of a handle. Any output pointer may be NULL.
 *
 * # Safety
 * `t` must be a live handle; non-NULL outputs must be writable.
 */
int32_t qerl_tensor_dims(const struct QerlTensor *t, size_t *rows, size_t *cols, int32_t *format);

/**
 * Writes the reconstructed matrix, row-major, into `out[0..len]`;
 * `len` must be at least rows * cols.
 *
 * # Safety
 * `t` must be a live handle and `out` must hold `len` doubles.
 */
int32_t qerl_dequantize(const struct QerlTensor *t, double *out, size_t len);

/**
 * Serializes to the QERL container. `*written` always receives the full
 * size; call with `buf = NULL` to query it. Returns
 * `QERL_ERR_BUFFER_TOO_SMALL` when `cap` is short.
 *
 * # Safety
 * `t` must be a live handle, `written` writable, and `buf` (if not NULL)
 * must hold `cap` bytes.
 */
int32_t qerl_tensor_serialize(const struct QerlTensor *t,
                              uint8_t *buf,
                              size_t cap,
                              size_t *written);

/**
 * Parses a QERL container into a new handle.
 *
 * # Safety
 * `buf` must hold `len` readable bytes and `out` must be writable.
 */
int32_t qerl_tensor_deserialize(const uint8_t *buf, size_t len, struct QerlTensor **out);

/**
 * Mean squared and max absolute reconstruction error of quantizing `data`.
 *
 * # Safety
 * `data` must point to `rows * cols` doubles; `mse` and `max_abs` writable.
 */
int32_t qerl_error_report(const double *data,
                          size_t rows,
                          size_t cols,
                          int32_t format,
                          double *mse,
                          double *max_abs);

/**
 * Nearest E2M1 code (ties to even, saturating at ±6). NaN maps to +0.
 */
uint8_t qerl_e2m1_encode(double x);

/**
 * Value of an E2M1 code; only the low nibble is read.
 */
double qerl_e2m1_decode(uint8_t code);

/**
 * Noise std of stage `k` (1-based) of a `stages`-stage schedule.
 *
 * # Safety
 * `out` must be writable.
 */
int32_t qerl_sigma_at_stage(double sigma_start,
                            double sigma_end,
                            size_t stages,
                            int32_t decay,
                            size_t k,
                            double *out);

/**
 * Group-normalized advantages of `n` rewards into `out[0..n]`.
 *
 * # Safety
 * `rewards` and `out` must each hold `n` doubles (they may alias).
 */
int32_t qerl_group_advantages(const double *rewards, size_t n, double eps, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QERL_H */

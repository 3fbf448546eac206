#ifndef LANDMARK_MTL_H
#define LANDMARK_MTL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LmtlStatus {
  LMTL_STATUS_OK = 0,
  LMTL_STATUS_NULL_POINTER = 1,
  LMTL_STATUS_INVALID_ARGUMENT = 2,
  LMTL_STATUS_IO = 3,
  LMTL_STATUS_FORMAT = 4,
  LMTL_STATUS_DIMENSION_MISMATCH = 5,
  LMTL_STATUS_BUFFER_TOO_SMALL = 6,
  LMTL_STATUS_PANIC = 7,
} LmtlStatus;

/**
 * Phone inventory with manner classes.
 */
typedef struct LmtlInventory LmtlInventory;

/**
 * Trained two-headed network.
 */
typedef struct LmtlNet LmtlNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Length in bytes of the last error message on this thread, excluding the
 * terminating NUL.
 */
uintptr_t lmtl_last_error_length(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len - 1` bytes). Returns the full message length excluding the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t lmtl_last_error_message(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lmtl_version(void);

/**
 * Loads an LMNN model file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LmtlStatus lmtl_net_load(const char *path, struct LmtlNet **out);

/**
 * Releases a network handle. Null is ignored.
 *
 * # Safety
 * `net` must come from [`lmtl_net_load`] and not be used afterwards.
 */
void lmtl_net_free(struct LmtlNet *net);

/**
 * Input width; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
uintptr_t lmtl_net_input_dim(const struct LmtlNet *net);

/**
 * Number of phone classes; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
uintptr_t lmtl_net_phone_classes(const struct LmtlNet *net);

/**
 * Number of landmark classes; 0 for a null handle.
 *
 * # Safety
 * `net` must be null or a live handle.
 */
uintptr_t lmtl_net_landmark_classes(const struct LmtlNet *net);

/**
 * Posteriors of both heads for `frames` row-major input rows of width `dim`.
 * `phone_out` receives `frames * phone_classes` values and `landmark_out`
 * `frames * landmark_classes`; either may be null to skip it.
 *
 * # Safety
 * `x` must hold `frames * dim` values and the outputs must be large enough.
 */
enum LmtlStatus lmtl_net_forward(const struct LmtlNet *net,
                                 const double *x,
                                 uintptr_t frames,
                                 uintptr_t dim,
                                 double *phone_out,
                                 double *landmark_out);

/**
 * Landmark detection: argmax class and margin confidence per frame.
 *
 * # Safety
 * `x` must hold `frames * dim` values; `classes_out` and `confidence_out`
 * must hold `frames` entries each.
 */
enum LmtlStatus lmtl_net_detect(const struct LmtlNet *net,
                                const double *x,
                                uintptr_t frames,
                                uintptr_t dim,
                                uint32_t *classes_out,
                                double *confidence_out);

/**
 * Margin confidence of a posterior of length `len`.
 *
 * # Safety
 * `p` must hold `len` values and `out` must be valid.
 */
enum LmtlStatus lmtl_confidence(const double *p, uintptr_t len, double *out);

/**
 * The built-in 48-phone TIMIT inventory.
 *
 * # Safety
 * `out` must be valid.
 */
enum LmtlStatus lmtl_inventory_timit(struct LmtlInventory **out);

/**
 * Loads a `phone manner` inventory file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid.
 */
enum LmtlStatus lmtl_inventory_load(const char *path, struct LmtlInventory **out);

/**
 * Number of phones; 0 for a null handle.
 *
 * # Safety
 * `inv` must be null or a live handle.
 */
uintptr_t lmtl_inventory_len(const struct LmtlInventory *inv);

/**
 * Releases an inventory handle. Null is ignored.
 *
 * # Safety
 * `inv` must come from an inventory constructor and not be used afterwards.
 */
void lmtl_inventory_free(struct LmtlInventory *inv);

/**
 * Frame landmark labels (class indices) for a `.phn` alignment. Writes
 * `frames` entries to `labels_out`; `radius` 0 disables expansion.
 *
 * # Safety
 * `phn` must be a NUL-terminated string and `labels_out` hold `frames`
 * entries.
 */
enum LmtlStatus lmtl_label_phn(const struct LmtlInventory *inv,
                               const char *phn,
                               uint32_t sample_rate,
                               uintptr_t frames,
                               double hop,
                               uintptr_t radius,
                               uint8_t *labels_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LANDMARK_MTL_H */

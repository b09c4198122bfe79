#ifndef REPDYN_H
#define REPDYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 5 match the CLI's exit codes.
 */
typedef enum RdStatus {
  RD_STATUS_OK = 0,
  RD_STATUS_CONFIG = 2,
  RD_STATUS_IO = 3,
  RD_STATUS_MISSING_INPUT = 4,
  RD_STATUS_NUMERIC = 5,
  RD_STATUS_NULL_POINTER = 10,
  RD_STATUS_INVALID_UTF8 = 11,
  RD_STATUS_BUFFER_TOO_SMALL = 12,
  RD_STATUS_OUT_OF_RANGE = 13,
  RD_STATUS_PANIC = 14,
} RdStatus;

/**
 * A similarity diagram (rows x columns of f64).
 */
typedef struct RdDiagram RdDiagram;

/**
 * An opened checkpoint store.
 */
typedef struct RdStore RdStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *rd_last_error(void);

/**
 * Opens and validates the checkpoint store at `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RdStatus rd_store_open(const char *path, struct RdStore **out);

/**
 * # Safety
 * `store` must come from [`rd_store_open`] and not be used afterwards.
 */
void rd_store_free(struct RdStore *store);

/**
 * Number of grid epochs, 0 for a null handle.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t rd_store_num_epochs(const struct RdStore *store);

/**
 * Number of probe-set examples, 0 for a null handle.
 *
 * # Safety
 * `store` must be null or a live handle.
 */
size_t rd_store_num_examples(const struct RdStore *store);

/**
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
enum RdStatus rd_store_epoch_at(const struct RdStore *store, size_t index, uint32_t *out);

/**
 * CKA diagram of `layer` over the full probe set. `store_col` may be null
 * for a within-run diagram.
 *
 * # Safety
 * Handles must be live (or null for `store_col`); `layer` NUL-terminated;
 * `out` writable.
 */
enum RdStatus rd_cka_diagram(const struct RdStore *store_row,
                             const struct RdStore *store_col,
                             const char *layer,
                             struct RdDiagram **out);

/**
 * # Safety
 * `d` must come from this library and not be used afterwards.
 */
void rd_diagram_free(struct RdDiagram *d);

/**
 * # Safety
 * `d` must be null or a live handle.
 */
size_t rd_diagram_rows(const struct RdDiagram *d);

/**
 * # Safety
 * `d` must be null or a live handle.
 */
size_t rd_diagram_cols(const struct RdDiagram *d);

/**
 * # Safety
 * `d` must be a live handle; `out` writable.
 */
enum RdStatus rd_diagram_value_at(const struct RdDiagram *d, size_t row, size_t col, double *out);

/**
 * Linear CKA between `f` (`m x p`) and `g` (`m x q`), both row-major.
 *
 * # Safety
 * `f` must hold `m*p` values, `g` `m*q` values; `out` writable.
 */
enum RdStatus rd_cka(const double *f, const double *g, size_t m, size_t p, size_t q, double *out);

/**
 * Fraction of cells on which two stacks of label grids agree. Each stack is
 * `planes x rows x cols` row-major.
 *
 * # Safety
 * `a` and `b` must each hold `planes*rows*cols` values; `out` writable.
 */
enum RdStatus rd_drs(const uint32_t *a,
                     const uint32_t *b,
                     size_t planes,
                     size_t rows,
                     size_t cols,
                     double *out);

/**
 * 4-connected same-label regions of one `rows x cols` grid.
 *
 * # Safety
 * `labels` must hold `rows*cols` values; `out` writable.
 */
enum RdStatus rd_fragment_count(const uint32_t *labels, size_t rows, size_t cols, size_t *out);

/**
 * Writes the default three-phase epoch grid for `total_epochs` into `buf`.
 * `out_len` receives the grid length; if `capacity` is smaller nothing is
 * written and `RD_STATUS_BUFFER_TOO_SMALL` is returned. `buf` may be null
 * when `capacity` is 0.
 *
 * # Safety
 * `buf` must have room for `capacity` values; `out_len` writable.
 */
enum RdStatus rd_paper_epoch_grid(uint32_t total_epochs,
                                  uint32_t *buf,
                                  size_t capacity,
                                  size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPDYN_H */

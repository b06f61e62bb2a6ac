#ifndef DDCRNN_H
#define DDCRNN_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DdcrnnStatus {
  DDCRNN_STATUS_OK = 0,
  DDCRNN_STATUS_NULL_POINTER = 1,
  DDCRNN_STATUS_INVALID_ARGUMENT = 2,
  DDCRNN_STATUS_PARSE = 3,
  DDCRNN_STATUS_VALIDATION = 4,
  DDCRNN_STATUS_SHAPE = 5,
  DDCRNN_STATUS_NUMERIC = 6,
  DDCRNN_STATUS_CHECKPOINT = 7,
  DDCRNN_STATUS_IO = 8,
  /**
   * The metric is undefined for this input (constant series, every
   * observation below the floor). Outputs are left untouched.
   */
  DDCRNN_STATUS_UNDEFINED = 9,
  DDCRNN_STATUS_PANIC = 10,
} DdcrnnStatus;

/**
 * A trained network or fitted linear AR baseline loaded from a checkpoint.
 */
typedef struct DdcrnnModel DdcrnnModel;

/**
 * A traffic panel read from CSV.
 */
typedef struct DdcrnnPanel DdcrnnPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ddcrnn_version(void);

/**
 * Message of the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *ddcrnn_last_error(void);

/**
 * Reads a panel CSV into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DdcrnnStatus ddcrnn_panel_read(const char *path, struct DdcrnnPanel **out);

/**
 * Time steps and node count of a panel.
 *
 * # Safety
 * `panel` must be a live handle; `rows` and `cols` writable pointers.
 */
enum DdcrnnStatus ddcrnn_panel_dims(const struct DdcrnnPanel *panel, size_t *rows, size_t *cols);

/**
 * Copies the row-major `rows × cols` values into `buf`, which must hold
 * exactly `len = rows * cols` doubles.
 *
 * # Safety
 * `panel` must be a live handle and `buf` valid for `len` writes.
 */
enum DdcrnnStatus ddcrnn_panel_values(const struct DdcrnnPanel *panel, double *buf, size_t len);

/**
 * Borrowed id of node `index`, or null when out of range. Valid while the
 * panel lives.
 *
 * # Safety
 * `panel` must be a live handle or null.
 */
const char *ddcrnn_panel_node_id(const struct DdcrnnPanel *panel, size_t index);

/**
 * # Safety
 * `panel` must be null or a handle from [`ddcrnn_panel_read`] not yet freed.
 */
void ddcrnn_panel_free(struct DdcrnnPanel *panel);

/**
 * Loads a model or linear AR checkpoint into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DdcrnnStatus ddcrnn_model_load(const char *path, struct DdcrnnModel **out);

/**
 * Input window length and native output horizon. An output horizon of 1
 * marks a recursive model and 0 a baseline; both accept any horizon.
 *
 * # Safety
 * `model` must be a live handle; `input` and `output` writable pointers.
 */
enum DdcrnnStatus ddcrnn_model_horizons(const struct DdcrnnModel *model,
                                        size_t *input,
                                        size_t *output);

/**
 * Forecasts `horizon` steps from a row-major `rows × nodes` window in
 * original units. `out` receives `horizon × nodes` values row-major.
 *
 * # Safety
 * `model` must be a live handle, `inputs` valid for `rows * nodes` reads
 * and `out` valid for `out_len` writes.
 */
enum DdcrnnStatus ddcrnn_model_forecast(const struct DdcrnnModel *model,
                                        const double *inputs,
                                        size_t rows,
                                        size_t nodes,
                                        size_t horizon,
                                        double *out,
                                        size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle from [`ddcrnn_model_load`] not yet freed.
 */
void ddcrnn_model_free(struct DdcrnnModel *model);

/**
 * Pearson correlation of the columns of a row-major `rows × cols` window,
 * written to `out` as `cols × cols`.
 *
 * # Safety
 * `window` valid for `rows * cols` reads, `out` for `cols * cols` writes.
 */
enum DdcrnnStatus ddcrnn_pearson_adjacency(const double *window,
                                           size_t rows,
                                           size_t cols,
                                           double *out);

/**
 * Autocorrelation at lags `1..=lags`, written to `out[0..lags]`.
 *
 * # Safety
 * `series` valid for `n` reads, `out` for `lags` writes.
 */
enum DdcrnnStatus ddcrnn_acf(const double *series, size_t n, size_t lags, double *out);

/**
 * Partial autocorrelation at lags `1..=lags`, written to `out[0..lags]`.
 *
 * # Safety
 * `series` valid for `n` reads, `out` for `lags` writes.
 */
enum DdcrnnStatus ddcrnn_pacf(const double *series, size_t n, size_t lags, double *out);

/**
 * Mean absolute percentage error over entries with `|obs| >= floor`.
 * `excluded` (may be null) receives the number of skipped entries.
 *
 * # Safety
 * `obs` and `pred` valid for `n` reads; `value` writable.
 */
enum DdcrnnStatus ddcrnn_mape(const double *obs,
                              const double *pred,
                              size_t n,
                              double floor,
                              double *value,
                              size_t *excluded);

/**
 * Coefficient of determination of `pred` against `obs`.
 *
 * # Safety
 * `obs` and `pred` valid for `n` reads; `value` writable.
 */
enum DdcrnnStatus ddcrnn_r_squared(const double *obs, const double *pred, size_t n, double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDCRNN_H */

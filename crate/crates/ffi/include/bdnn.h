#ifndef BDNN_H
#define BDNN_H

#include <stddef.h>
#include <stdint.h>

typedef enum BdnnStatus {
  BDNN_STATUS_OK = 0,
  BDNN_STATUS_NULL_POINTER = 1,
  BDNN_STATUS_INVALID_ARGUMENT = 2,
  BDNN_STATUS_OUT_OF_RANGE = 3,
  BDNN_STATUS_NUMERICAL = 4,
  BDNN_STATUS_PARSE = 5,
  BDNN_STATUS_IO = 6,
  BDNN_STATUS_UTF8 = 7,
  BDNN_STATUS_PANIC = 8,
} BdnnStatus;

// Opaque trained network.
typedef struct BdnnModel BdnnModel;

// Opaque dispersion table.
typedef struct BdnnTable BdnnTable;

// Library version as a static NUL-terminated string.
const char *bdnn_version(void);

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes without the
// terminator, or 0 when the last call succeeded.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t bdnn_last_error_message(char *buf, size_t len);

// Single-pass power transmission through `layers` absorbing layers of
// thickness `h_mm`, extinction `kappa`, at free-space wavelength `wavelength_mm`.
//
// # Safety
// `out` must be null or point to writable memory for one `double`.
enum BdnnStatus bdnn_slab_power_transmission(double kappa,
                                             double h_mm,
                                             double wavelength_mm,
                                             uint32_t layers,
                                             double *out);

// Built-in synthetic dispersion table.
//
// # Safety
// `out` must be null or valid for writing one pointer.
enum BdnnStatus bdnn_table_synthetic(struct BdnnTable **out);

// Loads a `frequency_thz,n,kappa` CSV table.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
enum BdnnStatus bdnn_table_load(const char *path, struct BdnnTable **out);

// # Safety
// `table` must be null or a handle from this library not yet freed.
void bdnn_table_free(struct BdnnTable *table);

// Loads a model JSON file written by `bdnn train`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for writing one pointer.
enum BdnnStatus bdnn_model_load(const char *path, struct BdnnModel **out);

// Parses a model from a JSON string.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be valid for writing one pointer.
enum BdnnStatus bdnn_model_from_json(const char *json, struct BdnnModel **out);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void bdnn_model_free(struct BdnnModel *model);

// Number of detectors behind the output plane.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum BdnnStatus bdnn_model_detector_count(const struct BdnnModel *model, size_t *out);

// Power efficiency (detector power over input power) of one detector at one frequency.
//
// # Safety
// `model` and `table` must be live handles; `out` must be writable.
enum BdnnStatus bdnn_efficiency(const struct BdnnModel *model,
                                const struct BdnnTable *table,
                                double frequency_thz,
                                size_t detector,
                                double *out);

// Efficiency of `detector` at each of `count` frequencies, with the output
// plane displaced axially by `dz_mm`. Writes `count` values to `out`.
//
// # Safety
// `frequencies` must be readable and `out` writable for `count` doubles.
enum BdnnStatus bdnn_spectrum_scan(const struct BdnnModel *model,
                                   const struct BdnnTable *table,
                                   const double *frequencies,
                                   size_t count,
                                   double dz_mm,
                                   size_t detector,
                                   double *out);

#endif  /* BDNN_H */

#ifndef XCE_H
#define XCE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XceStatus {
  XCE_STATUS_OK = 0,
  XCE_STATUS_NULL_POINTER = 1,
  XCE_STATUS_INVALID_ARGUMENT = 2,
  XCE_STATUS_SINGULAR_MATRIX = 3,
  XCE_STATUS_SHAPE = 4,
  XCE_STATUS_DEGENERATE_CHANNEL = 5,
  XCE_STATUS_CONFIG = 6,
  XCE_STATUS_FORMAT = 7,
  XCE_STATUS_CONTRACT = 8,
  XCE_STATUS_NON_FINITE = 9,
  XCE_STATUS_IO = 10,
  XCE_STATUS_PANIC = 11,
} XceStatus;

// Uniform linear array.
typedef struct XceArray XceArray;

// Loaded estimator weights.
typedef struct XceModel XceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call into this library.
const char *xce_last_error(void);

// Library version as a static NUL-terminated string.
const char *xce_version(void);

// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum XceStatus xce_array_new(size_t antennas, double wavelength, struct XceArray **out);

// # Safety
// `array` must come from [`xce_array_new`] and not be used afterwards.
void xce_array_free(struct XceArray *array);

// `2·D²/λ` for the array aperture `D`.
//
// # Safety
// Pointers must be valid.
enum XceStatus xce_rayleigh_distance(const struct XceArray *array, double *out);

// Far-field steering vector into `out` (`out_len` = 2·M doubles).
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum XceStatus xce_steer_far(const struct XceArray *array,
                             double theta,
                             double *out,
                             size_t out_len);

// Near-field steering vector at distance `r` metres.
//
// # Safety
// `out` must point to `out_len` writable doubles.
enum XceStatus xce_steer_near(const struct XceArray *array,
                              double theta,
                              double r,
                              double *out,
                              size_t out_len);

// `‖h − ĥ‖² / ‖h‖²` for two length-`m` complex vectors.
//
// # Safety
// `h_true` and `h_hat` must each point to `2·m` readable doubles.
enum XceStatus xce_nmse(const double *h_true, const double *h_hat, size_t m, double *out);

// Loads `XCEW1` weights. The architecture comes from the experiment
// config at `config_path`, or the defaults when it is null.
//
// # Safety
// Paths must be NUL-terminated; `out` must be writable.
enum XceStatus xce_model_load(const char *weights_path,
                              const char *config_path,
                              struct XceModel **out);

// # Safety
// `model` must come from [`xce_model_load`] and not be used afterwards.
void xce_model_free(struct XceModel *model);

// Number of antennas the model expects.
//
// # Safety
// Pointers must be valid.
enum XceStatus xce_model_antennas(const struct XceModel *model, size_t *out);

// Denoises `batch` LS observations laid out back to back, each `2·M`
// doubles, into `out` with the same layout.
//
// # Safety
// `h_ls` and `out` must each point to `batch·2·M` doubles.
enum XceStatus xce_model_estimate(const struct XceModel *model,
                                  const double *h_ls,
                                  size_t batch,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XCE_H */

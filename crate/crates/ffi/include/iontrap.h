/*
 * Copyright 2026 The iontrap Authors
 * SPDX-License-Identifier: Apache-2.0
 */

#ifndef IONTRAP_H
#define IONTRAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum IontrapStatus {
  IONTRAP_STATUS_OK = 0,
  IONTRAP_STATUS_NULL_POINTER = 1,
  IONTRAP_STATUS_INVALID_UTF8 = 2,
  IONTRAP_STATUS_INVALID_ARGUMENT = 3,
  IONTRAP_STATUS_CONFIG = 4,
  IONTRAP_STATUS_NUMERICAL = 5,
  IONTRAP_STATUS_IO = 6,
  // The command ran but a fit did not converge; the result handle is
  // still valid.
  IONTRAP_STATUS_NOT_CONVERGED = 7,
  IONTRAP_STATUS_PANIC = 8,
} IontrapStatus;

// Opaque experiment configuration.
typedef struct IontrapConfig IontrapConfig;

// Opaque result of [`iontrap_run`].
typedef struct IontrapResult IontrapResult;

// Row-major truth table; row = input, column = output, both in the order
// `|S,0>, |D,0>, |S,1>, |D,1>`.
typedef struct IontrapTruthTable {
  double probabilities[16];
  double stderr[16];
  // Population outside the computational subspace, per input.
  double leakage[4];
  double phi_time;
  double t0;
} IontrapTruthTable;

// Options of [`iontrap_fit_flop`]; a zero-initialised struct gives the
// defaults.
typedef struct IontrapFlopOptions {
  // Constrain `W12 = sqrt(2) W01`.
  bool lock_sqrt2;
  // Starting `W01` in rad/s; `<= 0` means none.
  double omega01_hint;
  // Keep both frequencies fixed at these values when both are `> 0`.
  double fixed_omega01;
  double fixed_omega12;
} IontrapFlopOptions;

// Flop-model fit result. `values` and `stderr` are ordered
// `a_S0, a_D0, a_S1, a_D1, W01, W12`.
typedef struct IontrapFlopFit {
  double values[6];
  double stderr[6];
  double ratio;
  double ratio_err;
  double chi2;
  size_t dof;
  bool converged;
  bool rank_deficient;
} IontrapFlopFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *iontrap_version(void);

// Message of the last failure on the calling thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *iontrap_last_error(void);

// Parse a TOML configuration.
//
// # Safety
// `toml` must be NULL or a NUL-terminated string; `out` must be NULL or
// writable.
enum IontrapStatus iontrap_config_from_toml(const char *toml, struct IontrapConfig **out);

// Load a configuration file (TOML, or the `config` field of a JSON
// summary).
//
// # Safety
// As for [`iontrap_config_from_toml`].
enum IontrapStatus iontrap_config_load(const char *path, struct IontrapConfig **out);

// Override the master seed.
//
// # Safety
// `config` must be NULL or a live handle.
enum IontrapStatus iontrap_config_set_seed(struct IontrapConfig *config, uint64_t seed);

// Override the shots per point.
//
// # Safety
// `config` must be NULL or a live handle.
enum IontrapStatus iontrap_config_set_shots(struct IontrapConfig *config, size_t shots);

// # Safety
// `config` must be NULL or a handle not yet freed.
void iontrap_config_free(struct IontrapConfig *config);

// Run a config-driven command (`modes`, `stark-scan`, `truth-table`,
// `rabi-flop`, `ghz`, `echo`) with `threads` workers (0 = one per core).
//
// # Safety
// `config` must be NULL or a live handle, `command` NULL or a
// NUL-terminated string, `out` NULL or writable.
enum IontrapStatus iontrap_run(const struct IontrapConfig *config,
                               const char *command,
                               size_t threads,
                               struct IontrapResult **out);

// JSON summary of a result (same schema as the command line
// `summary.json`). Owned by the handle; NULL if `result` is NULL.
//
// # Safety
// `result` must be NULL or a live handle.
const char *iontrap_result_json(const struct IontrapResult *result);

// Write the CSV artifacts and `summary.json` into directory `dir`.
//
// # Safety
// `result` must be NULL or a live handle, `dir` NULL or a NUL-terminated
// string.
enum IontrapStatus iontrap_result_write(const struct IontrapResult *result, const char *dir);

// # Safety
// `result` must be NULL or a handle not yet freed.
void iontrap_result_free(struct IontrapResult *result);

// Conditional-phase gate time `(pi/2) / rate`; `differential` selects the
// differential Ramsey slope `2 kappa` instead of the per-level shift.
//
// # Safety
// `out` must be NULL or writable.
enum IontrapStatus iontrap_gate_time(double eta,
                                     double rabi_0,
                                     double detuning,
                                     bool differential,
                                     double *out);

// Multi-ion entangling time `2 pi Delta / (eta Omega)^2`.
//
// # Safety
// `out` must be NULL or writable.
enum IontrapStatus iontrap_entangle_time(double eta_bus,
                                         double rabi_0,
                                         double detuning,
                                         double *out);

// Light-shift unit `kappa = eta^2 Omega0^2 / (4 Delta)`.
//
// # Safety
// `out` must be NULL or writable.
enum IontrapStatus iontrap_light_shift(double eta, double rabi_0, double detuning, double *out);

// Run the truth-table experiment described by `config`.
//
// # Safety
// `config` must be NULL or a live handle, `out` NULL or writable.
enum IontrapStatus iontrap_truth_table(const struct IontrapConfig *config,
                                       size_t threads,
                                       struct IontrapTruthTable *out);

// Fit `P_D(tau)` samples. `stderr` may be NULL (unweighted fit).
//
// # Safety
// `tau` and `p_d` (and `stderr` if non-NULL) must point to `len` doubles;
// `options` may be NULL; `out` must be NULL or writable.
enum IontrapStatus iontrap_fit_flop(const double *tau,
                                    const double *p_d,
                                    const double *stderr,
                                    size_t len,
                                    const struct IontrapFlopOptions *options,
                                    struct IontrapFlopFit *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IONTRAP_H */

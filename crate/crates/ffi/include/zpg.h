#ifndef ZPG_H
#define ZPG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum ZpgStatus {
  ZPG_STATUS_OK = 0,
  ZPG_STATUS_NULL_POINTER = 1,
  ZPG_STATUS_INVALID_ARGUMENT = 2,
  ZPG_STATUS_NUMERICAL_FAILURE = 3,
  ZPG_STATUS_GUARD_REFUSED = 4,
  ZPG_STATUS_PANIC = 5,
} ZpgStatus;

// A photon-number distribution.
typedef struct ZpgDistribution ZpgDistribution;

// An emitter network with its circuit.
typedef struct ZpgNetwork ZpgNetwork;

// Propagation settings; pass NULL for defaults.
typedef struct ZpgSettings {
  double t0;
  // NaN picks the end of the last pulse plus 15 lifetimes of the slowest emitter.
  double t1;
  double rtol;
  double atol;
  // 0 uses the global thread pool.
  size_t workers;
} ZpgSettings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
const char *zpg_last_error_message(void);

// Default settings (horizon chosen per network).
struct ZpgSettings zpg_settings_default(void);

// Single two-level emitter under a square pulse of area `theta` and length `tau`
// (no pulse when `tau <= 0`), starting in the ground state.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum ZpgStatus zpg_network_new_two_level(double gamma,
                                         double theta,
                                         double tau,
                                         double detuning,
                                         struct ZpgNetwork **out);

// Network from the `sources` and `circuit` tables of a TOML experiment config.
//
// # Safety
// `config_toml` must be a NUL-terminated string; `out` must be writable.
enum ZpgStatus zpg_network_from_toml(const char *config_toml, struct ZpgNetwork **out);

// # Safety
// `net` must be NULL or a handle from a `zpg_network_*` constructor, not yet freed.
void zpg_network_free(struct ZpgNetwork *net);

// # Safety
// `net` must be a live network handle; `out` must be writable.
enum ZpgStatus zpg_network_num_modes(const struct ZpgNetwork *net, size_t *out);

// Photon-number distribution on a Fourier grid with `len` truncations.
//
// # Safety
// `truncations` must point to `len` values; `settings` may be NULL; `out` must be writable.
enum ZpgStatus zpg_pn_distribution(const struct ZpgNetwork *net,
                                   const size_t *truncations,
                                   size_t len,
                                   const struct ZpgSettings *settings,
                                   struct ZpgDistribution **out);

// # Safety
// `dist` must be NULL or a handle from [`zpg_pn_distribution`], not yet freed.
void zpg_distribution_free(struct ZpgDistribution *dist);

// Number of stored probabilities (product of the truncations).
//
// # Safety
// `dist` must be a live distribution handle; `out` must be writable.
enum ZpgStatus zpg_distribution_len(const struct ZpgDistribution *dist, size_t *out);

// Copies the probabilities, row-major with the last detector fastest.
//
// # Safety
// `out` must have room for `len` doubles.
enum ZpgStatus zpg_distribution_probabilities(const struct ZpgDistribution *dist,
                                              double *out,
                                              size_t len);

// Inversion residue and tail mass of a distribution.
//
// # Safety
// `dist` must be live; both outputs must be writable.
enum ZpgStatus zpg_distribution_diagnostics(const struct ZpgDistribution *dist,
                                            double *residue,
                                            double *tail_mass);

// Click probabilities `β(m)` for the `2^M` patterns, first detector as the most significant bit.
//
// # Safety
// `out` must have room for `len` doubles; `settings` may be NULL.
enum ZpgStatus zpg_threshold_probabilities(const struct ZpgNetwork *net,
                                           const struct ZpgSettings *settings,
                                           double *out,
                                           size_t len);

// Mean photon number at detector efficiency `eta`, by finite differences.
//
// # Safety
// `out` must be writable; `settings` may be NULL.
enum ZpgStatus zpg_mean_photon_number(const struct ZpgNetwork *net,
                                      double eta,
                                      const struct ZpgSettings *settings,
                                      double *out);

// Second-order correlation `g2` by finite differences.
//
// # Safety
// `out` must be writable; `settings` may be NULL.
enum ZpgStatus zpg_g2(const struct ZpgNetwork *net,
                      const struct ZpgSettings *settings,
                      double *out);

// Photon-number parity `Σ (−1)^n p(n)`.
//
// # Safety
// `out` must be writable; `settings` may be NULL.
enum ZpgStatus zpg_parity(const struct ZpgNetwork *net,
                          const struct ZpgSettings *settings,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZPG_H */

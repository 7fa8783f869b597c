#pragma once

#include <array>
#include <vector>

#include "g2kit/errors.hpp"

namespace g2kit::kinetics {

/// ns^-1 -> s^-1 conversion for count rates.
inline constexpr double kNsPerS = 1e9;

/// Transition rates of the three-level emitter (ground 1, excited 2,
/// shelf 3), all in ns^-1.  Level 2 -> 1 decays emit a photon; the shelf
/// is populated from level 2 at k23 and feeds back into level 2 at k32.
struct RateConstants {
  double k12 = 0.0;  ///< excitation 1 -> 2
  double k21 = 0.0;  ///< radiative decay 2 -> 1
  double k23 = 0.0;  ///< shelving 2 -> 3
  double k32 = 0.0;  ///< deshelving 3 -> 2

  /// Throws ValidationError unless all rates are finite and >= 0 with
  /// k21 > 0 and k32 > 0.
  void validate() const;
  bool is_valid() const noexcept;
};

/// Occupation probabilities of the three levels.
struct Populations {
  double sigma1 = 1.0;
  double sigma2 = 0.0;
  double sigma3 = 0.0;

  static Populations ground() { return {1.0, 0.0, 0.0}; }
  /// Components in [0,1] and summing to 1 within 1e-12.
  void validate() const;
};

/// The curve-shape observables plus the stationary excited population.
/// -(k_tm +- k_1m)/2 are the two nonzero eigenvalues of the rate generator.
struct DerivedParams {
  double g_e = 0.0;         ///< dimensionless shape parameter
  double k_tm = 0.0;        ///< rate sum k12+k21+k23+k32 (ns^-1)
  double k_1m = 0.0;        ///< eigenvalue splitting (ns^-1)
  double sigma2_inf = 0.0;  ///< stationary excited-state population

  void validate() const;
};

/// Overall collection-plus-detection probability per emitted photon.
struct DetectionEfficiency {
  double eta = 1.0;
  void validate() const;
};

/// Linear-in-power rate coefficients: k12, k23, k32 are affine in pump
/// power P (mW); k21 is power-independent.  Valid over [p_min_mW, p_max_mW].
struct PowerModel {
  double k12_slope = 0.0;      ///< ns^-1 mW^-1
  double k12_intercept = 0.0;  ///< ns^-1
  double k21 = 0.0;            ///< ns^-1
  double k23_slope = 0.0;
  double k23_intercept = 0.0;
  double k32_slope = 0.0;
  double k32_intercept = 0.0;
  double p_min_mW = 0.0;
  double p_max_mW = 0.0;

  /// Requires k21 > 0 and non-negative rates at both range endpoints.
  void validate() const;
};

/// Thrown when an inversion admits more than one physical solution.
struct AmbiguousSolutionError : Error {
  AmbiguousSolutionError(const std::string& msg,
                         std::vector<RateConstants> cands)
      : Error(msg), candidates(std::move(cands)) {}
  std::vector<RateConstants> candidates;
};

/// Stationary populations: the normalized null vector of the rate
/// generator, (k21*k32, k12*k32, k12*k23) / (k12*k23 + k12*k32 + k21*k32).
/// Throws DegenerateSystemError when the denominator vanishes.
Populations stationary(const RateConstants& rates);

/// Shape observables from rates:
///   k_tm = k12 + k21 + k23 + k32
///   k_1m = sqrt((k12 + k21 - k23 - k32)^2 + 4 k21 k23)
///   g_e  = (2 k12 k23 + k32 (k12 + k21 - k23 - k32)) / (k_1m k32)
/// Rejects k32 == 0 (g_e undefined) and k_1m == 0 (degenerate eigenvalues).
DerivedParams derived_from_rates(const RateConstants& rates);

/// Populations at time tau (ns) from the given initial condition, via the
/// closed-form solution of the rate equations (2x2 reduced system after
/// eliminating sigma1).  Outputs are clamped to [0,1] against roundoff.
Populations populations_at(const RateConstants& rates, double tau_ns,
                           const Populations& initial);

/// Normalized autocorrelation of the emitter,
///   g2(tau) = 1 - (1+g_e)/2 exp(-(k_tm+k_1m) tau / 2)
///           - (1-g_e)/2 exp(-(k_tm-k_1m) tau / 2),
/// evaluated in a form that returns exactly 0 at tau == 0.
double g2_analytic(const RateConstants& rates, double tau_ns);

/// Mean of g2_analytic over [tau_lo, tau_hi] (closed-form integral);
/// what a correlation bin of that span estimates.
double g2_bin_average(const RateConstants& rates, double tau_lo_ns,
                      double tau_hi_ns);

/// Inverse of derived_from_rates.  Exact elimination order:
///   k32 = 2 D / (k_tm + g_e k_1m)       with D = (k_tm^2 - k_1m^2)/4,
///   k12 = sigma2_inf (k_tm + g_e k_1m) / 2,
///   k21 - k23 from the k_1m equation,
/// followed by a damped Newton polish of the full 4x4 system.  Throws
/// NoSolutionError when the target is not realizable (forward residual
/// above 1e-9 relative or negative rates) and AmbiguousSolutionError on
/// the degenerate manifold k12 == k32 (g_e == 1), where a continuum of
/// k21+k23 splits reproduces the same observables.
RateConstants rates_from_derived(const DerivedParams& derived);

/// All physical rate tuples consistent with the three shape observables
/// plus a brightness constraint  eta * k21 * sigma2_inf = brightness
/// (counts/s).  With sigma2_inf replaced by the brightness product the
/// inversion reduces to a cubic in sigma2_inf and can have several valid
/// roots; candidates are sorted by ascending k12.
std::vector<RateConstants> observable_rate_candidates(
    double g_e, double k_tm, double k_1m, double brightness_per_s,
    const DetectionEfficiency& eta);

/// As observable_rate_candidates, but demands uniqueness: throws
/// NoSolutionError when empty and AmbiguousSolutionError (carrying all
/// candidates) when more than one solution exists.
RateConstants rates_from_observables(double g_e, double k_tm, double k_1m,
                                     double brightness_per_s,
                                     const DetectionEfficiency& eta);

/// Detected count rate N = eta * k21 * sigma2_inf, in counts/s.
double count_rate(const RateConstants& rates, const DetectionEfficiency& eta);

/// Detected count rate of the shelf-free reference emitter
/// (k23 = k32 = 0 limit): N = eta * k21 * k12 / (k12 + k21), counts/s.
double two_level_count_rate(double k12, double k21,
                            const DetectionEfficiency& eta);

/// Evaluate the power model at P (mW).  Throws ValidationError if P is
/// outside the validity range or any evaluated rate is negative.
RateConstants rates_at_power(const PowerModel& model, double power_mW);

}  // namespace g2kit::kinetics

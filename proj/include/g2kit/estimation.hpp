#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "g2kit/kinetics.hpp"
#include "g2kit/sim.hpp"

namespace g2kit::est {

/// Options for the weighted g2 fit.
struct FitOptions {
  /// Overall amplitude nuisance (normalization slack), Gaussian prior 1 +- sigma.
  bool fit_amplitude = true;
  double amplitude_prior_sigma = 0.05;
  /// Delay-origin nuisance for drifting electronics, prior 0 +- sigma (ns).
  bool fit_tau_offset = true;
  double tau_offset_prior_sigma_ns = 5.0;
  int max_iterations = 200;
  double step_tol = 1e-10;
  double residual_tol = 1e-12;
  /// Optional (g_e, k_tm, k_1m) starting point; otherwise guessed from
  /// the curve's dip width, shoulder height, and shoulder decay.
  std::optional<std::array<double, 3>> initial_guess;
};

/// Weighted least-squares estimate of the g2 shape parameters.
/// Covariance rows/cols are ordered (g_e, k_tm, k_1m, amplitude, tau_offset);
/// entries for disabled nuisance parameters are zero.
struct FitResult {
  double g_e = 0.0;
  double k_tm = 0.0;  ///< ns^-1
  double k_1m = 0.0;  ///< ns^-1
  double amplitude = 1.0;
  double tau_offset_ns = 0.0;
  std::array<std::array<double, 5>, 5> covariance{};
  double reduced_chi2 = 0.0;
  int iterations = 0;
  bool converged = false;
  int bins_used = 0;

  std::array<double, 3> shape() const { return {g_e, k_tm, k_1m}; }
};

/// One pump power in the analysis ladder.
struct PowerPoint {
  double power_mW = 0.0;
  sim::G2Curve curve;
  double brightness_per_s = 0.0;  ///< total detected counts/s (Eq. of N)
  FitResult fit;
  std::optional<kinetics::RateConstants> rates;  ///< filled after inversion
};

/// Result of the detection-efficiency calibration.
struct EtaCalibration {
  kinetics::DetectionEfficiency eta;
  std::vector<double> k21_per_ns;  ///< implied k21 at each power point
  double k21_rel_dispersion = 0.0;
};

struct CalibrationOptions {
  double eta_min = 1e-5;
  double eta_max = 0.5;
  int grid_points = 81;
  double log_eta_tol = 1e-6;  ///< golden-section width on ln(eta)
};

/// Linear fit of one rate vs power.
struct LinearCoeff {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_err = 0.0;
  double intercept_err = 0.0;
};

/// PowerModel plus regression diagnostics.
struct PowerModelFit {
  kinetics::PowerModel model;
  LinearCoeff k12, k23, k32;
  double k21_err = 0.0;
  double k21_rel_spread = 0.0;  ///< rel. std. dev. of per-point k21
};

/// Per-point rate uncertainties (for weighting the power regression).
struct RateSigmas {
  double k12 = 0.0, k21 = 0.0, k23 = 0.0, k32 = 0.0;
};

/// Free coefficients of the saturation fit.
struct SaturationOptions {
  bool free_k12_slope = true;
  bool free_k12_intercept = false;
  bool free_k21 = false;
  bool free_k23_slope = true;
  bool free_k23_intercept = false;
  bool free_k32_slope = true;
  bool free_k32_intercept = false;
  /// Per-point standard errors on N; defaults to sqrt(N) when absent.
  std::optional<std::vector<double>> sigma_per_s;
  int max_iterations = 200;
};

struct SaturationFit {
  kinetics::PowerModel model;
  std::vector<std::string> free_names;
  std::vector<double> free_values;
  std::vector<double> free_errors;
  std::vector<double> predicted_per_s;  ///< model N(P) at the data powers
  std::vector<double> reference_two_level_per_s;  ///< k23 = k32 = 0 curve
  double residual_norm = 0.0;
  double reduced_chi2 = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Remove uncorrelated-background dilution:
///   g2_corr = (g2_raw - (1 - rho^2)) / rho^2,
/// with standard errors scaled by 1/rho^2 and rho recorded on the output.
sim::G2Curve background_correct(const sim::G2Curve& curve, double rho);

/// Weighted fit of the three-level g2 model to a normalized curve.
/// Throws ValidationError for curves with < 10 bins and
/// UnidentifiableError for curves indistinguishable from g2 == 1.
FitResult fit_g2(const sim::G2Curve& curve, const FitOptions& options = {});

/// The paper-procedure efficiency calibration: eta is chosen so that the
/// k21 implied by each power point is as power-independent as possible
/// (minimum relative standard deviation, searched on a log-eta grid and
/// refined by golden section).  Points whose brightness inversion has
/// several branches contribute the branch most consistent with the other
/// points' k21.
EtaCalibration calibrate_eta(const std::vector<PowerPoint>& points,
                             const CalibrationOptions& options = {});

/// Rates for every power point at a fixed eta, using the same
/// k21-consistency branch selection as calibrate_eta.
std::vector<kinetics::RateConstants> invert_points_at_eta(
    const std::vector<PowerPoint>& points, const kinetics::DetectionEfficiency& eta);

/// Weighted linear regression of k12, k23, k32 against power plus the
/// weighted mean of k21.  With sigmas absent the fit is unweighted and
/// coefficient errors are scaled by the residual rms.
PowerModelFit extract_power_model(
    const std::vector<PowerPoint>& points,
    const std::vector<RateSigmas>* sigmas = nullptr);

/// Least-squares fit of N(P) = eta * k21 * sigma2_inf(rates_at_power(P))
/// over the selected free coefficients, seeded from model_seed.  Also
/// evaluates the shelf-free (k23 = k32 = 0) reference curve.
SaturationFit fit_saturation(const std::vector<std::pair<double, double>>& data,
                             const kinetics::PowerModel& model_seed,
                             const kinetics::DetectionEfficiency& eta,
                             const SaturationOptions& options = {});

}  // namespace g2kit::est

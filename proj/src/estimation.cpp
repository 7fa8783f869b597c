#include "g2kit/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "detail/linalg.hpp"
#include "detail/lm.hpp"

namespace g2kit::est {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + mid);
    m = (m + lo) / 2.0;
  }
  return m;
}

struct CurveData {
  std::vector<double> tau, y, sigma;
  double bin_width = 0.0;
};

/// Bins used for fitting: strictly positive sigma, |tau| at least one bin
/// half-width away from zero (quantization guard at the dip).
CurveData usable_bins(const sim::G2Curve& curve) {
  curve.validate();
  CurveData d;
  std::vector<double> spacings;
  for (std::size_t i = 1; i < curve.tau_ns.size(); ++i)
    spacings.push_back(curve.tau_ns[i] - curve.tau_ns[i - 1]);
  d.bin_width = spacings.empty() ? 1.0 : median(spacings);
  for (std::size_t i = 0; i < curve.tau_ns.size(); ++i) {
    if (!(curve.sigma[i] > 0.0))
      throw ValidationError("curve standard errors must be > 0");
    if (std::fabs(curve.tau_ns[i]) < 0.5 * d.bin_width) continue;
    d.tau.push_back(curve.tau_ns[i]);
    d.y.push_back(curve.g2[i]);
    d.sigma.push_back(curve.sigma[i]);
  }
  return d;
}

struct Guess {
  double g_e, rf, rs, amplitude;
};

/// Starting point from curve features: dip width -> fast rate, shoulder
/// height -> g_e, shoulder decay -> slow rate.
Guess guess_from_curve(const CurveData& d) {
  std::vector<std::size_t> order(d.tau.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(d.tau[a]) < std::fabs(d.tau[b]);
  });
  const std::size_t n = order.size();
  std::vector<double> u(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    u[i] = std::fabs(d.tau[order[i]]);
    y[i] = d.y[order[i]];
  }
  // +-2 bin moving average
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = (i >= 2) ? i - 2 : 0;
    const std::size_t hi = std::min(n - 1, i + 2);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += y[j];
    ys[i] = s / static_cast<double>(hi - lo + 1);
  }

  const double umax = u.back();
  std::vector<double> tail;
  for (std::size_t i = 0; i < n; ++i)
    if (u[i] >= 0.75 * umax) tail.push_back(y[i]);
  double plateau = median(tail);
  if (!(plateau > 0.0)) plateau = 1.0;

  const double dipval = (ys[0] + ys[std::min<std::size_t>(1, n - 1)]) / 2.0;
  const double yt = dipval + (plateau - dipval) * 0.632;
  double u632 = d.bin_width;
  for (std::size_t i = 0; i < n; ++i)
    if (ys[i] >= yt) {
      u632 = std::max(u[i], d.bin_width);
      break;
    }
  const double rf0 = 1.0 / u632;

  double m_max = -std::numeric_limits<double>::infinity();
  std::size_t ipeak = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (u[i] >= u632 && ys[i] > m_max) {
      m_max = ys[i];
      ipeak = i;
    }

  Guess g{1.2, rf0, rf0 / 20.0, plateau};
  if (m_max > plateau * 1.002 && m_max > dipval) {
    g.g_e = std::clamp(2.0 * m_max / plateau - 1.0, 1.05, 100.0);
    const double half = plateau + (m_max - plateau) / 2.0;
    double uhalf = u[ipeak] + 10.0 * d.bin_width;
    for (std::size_t i = ipeak; i < n; ++i)
      if (ys[i] <= half) {
        uhalf = u[i];
        break;
      }
    const double rs0 = std::log(2.0) / std::max(uhalf - u[ipeak], d.bin_width);
    g.rs = std::clamp(rs0, 1e-5 * rf0, 0.8 * rf0);
  }
  return g;
}

constexpr const char* kFreeNames[] = {"g_e", "ln_rf", "ln_rs", "amplitude",
                                      "tau_offset"};

}  // namespace

sim::G2Curve background_correct(const sim::G2Curve& curve, double rho) {
  curve.validate();
  if (!(rho > 0.0 && rho <= 1.0))
    throw ValidationError("rho must lie in (0, 1]");
  sim::G2Curve out = curve;
  const double r2 = rho * rho;
  const double floor_level = 1.0 - r2;
  for (std::size_t i = 0; i < out.g2.size(); ++i) {
    out.g2[i] = (curve.g2[i] - floor_level) / r2;
    out.sigma[i] = curve.sigma[i] / r2;
  }
  out.rho = rho;
  return out;
}

FitResult fit_g2(const sim::G2Curve& curve, const FitOptions& options) {
  const CurveData data = usable_bins(curve);
  const std::size_t n = data.tau.size();
  if (n < 10)
    throw ValidationError("g2 fit needs at least 10 usable bins");

  double flatness = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    flatness = std::max(flatness, std::fabs(data.y[i] - 1.0) / data.sigma[i]);
  if (flatness < 3.0)
    throw UnidentifiableError(
        "curve is statistically indistinguishable from g2 == 1");

  Guess g = guess_from_curve(data);
  if (options.initial_guess) {
    const auto& ig = *options.initial_guess;
    if (!(ig[1] > 0.0 && ig[2] >= 0.0 && ig[2] < ig[1]))
      throw ValidationError("initial guess needs k_tm > k_1m >= 0");
    g.g_e = ig[0];
    g.rf = (ig[1] + ig[2]) / 2.0;
    g.rs = std::max((ig[1] - ig[2]) / 2.0, 1e-9 * g.rf);
  }

  // parameter packing: g_e, ln rf, ln rs [, amplitude][, tau_offset]
  const int ia = options.fit_amplitude ? 3 : -1;
  const int it = options.fit_tau_offset ? (options.fit_amplitude ? 4 : 3) : -1;
  const std::size_t np = 3 + (ia >= 0 ? 1 : 0) + (it >= 0 ? 1 : 0);
  std::vector<double> p0 = {g.g_e, std::log(g.rf), std::log(g.rs)};
  if (ia >= 0) p0.push_back(options.fit_amplitude ? g.amplitude : 1.0);
  if (it >= 0) p0.push_back(0.0);

  auto residual_fn = [&](const std::vector<double>& p, std::vector<double>& r,
                         std::vector<double>* jac) {
    const double ge = p[0];
    const double rf = std::exp(p[1]);
    const double rs = std::exp(p[2]);
    const double amp = ia >= 0 ? p[ia] : 1.0;
    const double tau0 = it >= 0 ? p[it] : 0.0;
    const double a = (1.0 + ge) / 2.0;
    const double b = (1.0 - ge) / 2.0;
    const std::size_t rows = n + (ia >= 0 ? 1 : 0) + (it >= 0 ? 1 : 0);
    r.assign(rows, 0.0);
    if (jac) jac->assign(rows * np, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double dt = data.tau[i] - tau0;
      const double uu = std::fabs(dt);
      const double ef = std::exp(-rf * uu);
      const double es = std::exp(-rs * uu);
      const double shape = 1.0 - a * ef - b * es;
      const double w = 1.0 / data.sigma[i];
      r[i] = (amp * shape - data.y[i]) * w;
      if (!jac) continue;
      double* row = jac->data() + i * np;
      row[0] = amp * (-ef / 2.0 + es / 2.0) * w;
      row[1] = amp * a * uu * rf * ef * w;
      row[2] = amp * b * uu * rs * es * w;
      if (ia >= 0) row[ia] = shape * w;
      if (it >= 0) {
        const double sgn = (dt > 0.0) ? 1.0 : (dt < 0.0 ? -1.0 : 0.0);
        row[it] = amp * (a * rf * ef + b * rs * es) * (-sgn) * (-1.0) * w;
      }
    }
    // Gaussian priors pinning the nuisance parameters
    std::size_t row = n;
    if (ia >= 0) {
      r[row] = (p[ia] - 1.0) / options.amplitude_prior_sigma;
      if (jac) (*jac)[row * np + ia] = 1.0 / options.amplitude_prior_sigma;
      ++row;
    }
    if (it >= 0) {
      r[row] = p[it] / options.tau_offset_prior_sigma_ns;
      if (jac) (*jac)[row * np + it] = 1.0 / options.tau_offset_prior_sigma_ns;
    }
  };

  detail::LmOptions lmopts;
  lmopts.max_iterations = options.max_iterations;
  lmopts.step_tol = options.step_tol;
  lmopts.residual_tol = options.residual_tol;
  const detail::LmOutcome lm = detail::levenberg_marquardt(residual_fn, p0, lmopts);

  FitResult out;
  out.iterations = lm.iterations;
  out.converged = lm.converged;
  out.bins_used = static_cast<int>(n);

  double ge = lm.params[0];
  double rf = std::exp(lm.params[1]);
  double rs = std::exp(lm.params[2]);
  const bool swapped = rf < rs;
  if (swapped) {
    std::swap(rf, rs);
    ge = -ge;
  }
  out.g_e = ge;
  out.k_tm = rf + rs;
  out.k_1m = rf - rs;
  out.amplitude = ia >= 0 ? lm.params[ia] : 1.0;
  out.tau_offset_ns = it >= 0 ? lm.params[it] : 0.0;

  // data-only chi2 (priors excluded)
  {
    std::vector<double> r;
    residual_fn(lm.params, r, nullptr);
    double chi2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) chi2 += r[i] * r[i];
    const std::size_t dof = (n > np) ? n - np : 1;
    out.reduced_chi2 = chi2 / static_cast<double>(dof);
  }

  // map internal covariance to (g_e, k_tm, k_1m, amplitude, tau_offset)
  if (lm.covariance.size() == np * np) {
    const double rf_i = std::exp(lm.params[1]);
    const double rs_i = std::exp(lm.params[2]);
    // rows of d(out)/d(internal)
    std::array<std::vector<double>, 5> gmap;
    for (auto& row : gmap) row.assign(np, 0.0);
    gmap[0][0] = swapped ? -1.0 : 1.0;
    gmap[1][1] = rf_i;
    gmap[1][2] = rs_i;
    gmap[2][1] = swapped ? -rf_i : rf_i;
    gmap[2][2] = swapped ? rs_i : -rs_i;
    if (ia >= 0) gmap[3][ia] = 1.0;
    if (it >= 0) gmap[4][it] = 1.0;
    for (int r0 = 0; r0 < 5; ++r0)
      for (int c0 = 0; c0 < 5; ++c0) {
        double s = 0.0;
        for (std::size_t a2 = 0; a2 < np; ++a2)
          for (std::size_t b2 = 0; b2 < np; ++b2)
            s += gmap[r0][a2] * lm.covariance[a2 * np + b2] * gmap[c0][b2];
        out.covariance[r0][c0] = s;
      }
  }
  return out;
}

namespace {

/// Pick one inversion branch per point so the implied k21 values are as
/// mutually consistent as possible; returns indices and the achieved
/// relative standard deviation.
struct Selection {
  std::vector<std::size_t> index;
  double rel_sd = std::numeric_limits<double>::infinity();
};

Selection select_consistent_branch(
    const std::vector<std::vector<kinetics::RateConstants>>& cands) {
  Selection best;
  for (const auto& list : cands)
    if (list.empty()) return best;  // infeasible marker

  for (const auto& center_list : cands) {
    for (const auto& center : center_list) {
      const double lc = std::log(center.k21);
      std::vector<std::size_t> sel(cands.size());
      std::vector<double> k21s(cands.size());
      for (std::size_t i = 0; i < cands.size(); ++i) {
        std::size_t jbest = 0;
        double dbest = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cands[i].size(); ++j) {
          const double dist = std::fabs(std::log(cands[i][j].k21) - lc);
          if (dist < dbest) {
            dbest = dist;
            jbest = j;
          }
        }
        sel[i] = jbest;
        k21s[i] = cands[i][jbest].k21;
      }
      double mean = 0.0;
      for (double v : k21s) mean += v;
      mean /= static_cast<double>(k21s.size());
      double var = 0.0;
      for (double v : k21s) var += (v - mean) * (v - mean);
      var /= static_cast<double>(k21s.size());
      const double rel = std::sqrt(var) / mean;
      if (rel < best.rel_sd) {
        best.rel_sd = rel;
        best.index = sel;
      }
    }
  }
  return best;
}

std::vector<std::vector<kinetics::RateConstants>> candidates_at_eta(
    const std::vector<PowerPoint>& points, double eta) {
  std::vector<std::vector<kinetics::RateConstants>> out;
  out.reserve(points.size());
  for (const PowerPoint& pt : points) {
    try {
      out.push_back(kinetics::observable_rate_candidates(
          pt.fit.g_e, pt.fit.k_tm, pt.fit.k_1m, pt.brightness_per_s,
          {eta}));
    } catch (const Error&) {
      out.emplace_back();
    }
  }
  return out;
}

void check_points(const std::vector<PowerPoint>& points) {
  if (points.size() < 3)
    throw ValidationError("calibration needs at least 3 power points");
  for (const PowerPoint& pt : points) {
    if (!pt.fit.converged)
      throw ValidationError("all power-point fits must have converged");
    if (!(pt.brightness_per_s > 0.0))
      throw ValidationError("power points need brightness > 0");
    if (!(pt.power_mW > 0.0))
      throw ValidationError("power points need power > 0");
  }
}

}  // namespace

EtaCalibration calibrate_eta(const std::vector<PowerPoint>& points,
                             const CalibrationOptions& options) {
  check_points(points);
  if (!(options.eta_min > 0.0 && options.eta_max <= 1.0 &&
        options.eta_min < options.eta_max && options.grid_points >= 3))
    throw ValidationError("invalid calibration options");

  auto objective = [&](double eta) {
    return select_consistent_branch(candidates_at_eta(points, eta)).rel_sd;
  };

  const int ng = options.grid_points;
  const double lmin = std::log(options.eta_min);
  const double lmax = std::log(options.eta_max);
  double best_eta = 0.0;
  double best_obj = std::numeric_limits<double>::infinity();
  int best_idx = -1;
  for (int i = 0; i < ng; ++i) {
    const double eta =
        std::exp(lmin + (lmax - lmin) * i / static_cast<double>(ng - 1));
    const double obj = objective(eta);
    if (obj < best_obj) {
      best_obj = obj;
      best_eta = eta;
      best_idx = i;
    }
  }
  if (best_idx < 0 || !std::isfinite(best_obj))
    throw CalibrationError(
        "no detection efficiency makes all power points invertible");

  // golden-section refinement on ln(eta) between the grid neighbours
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = lmin + (lmax - lmin) * std::max(best_idx - 1, 0) / (ng - 1.0);
  double hi = lmin + (lmax - lmin) * std::min(best_idx + 1, ng - 1) / (ng - 1.0);
  double x1 = hi - gr * (hi - lo);
  double x2 = lo + gr * (hi - lo);
  double f1 = objective(std::exp(x1));
  double f2 = objective(std::exp(x2));
  while (hi - lo > options.log_eta_tol) {
    if (f1 < f2 || !std::isfinite(f2)) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = objective(std::exp(x1));
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = objective(std::exp(x2));
    }
    const double fbest = std::min(f1, f2);
    if (std::isfinite(fbest) && fbest < best_obj) {
      best_obj = fbest;
      best_eta = std::exp(f1 < f2 ? x1 : x2);
    }
  }

  const auto cands = candidates_at_eta(points, best_eta);
  const Selection sel = select_consistent_branch(cands);
  if (!std::isfinite(sel.rel_sd))
    throw CalibrationError("calibration lost feasibility during refinement");

  EtaCalibration out;
  out.eta = {best_eta};
  out.k21_rel_dispersion = sel.rel_sd;
  out.k21_per_ns.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    out.k21_per_ns[i] = cands[i][sel.index[i]].k21;
  return out;
}

std::vector<kinetics::RateConstants> invert_points_at_eta(
    const std::vector<PowerPoint>& points,
    const kinetics::DetectionEfficiency& eta) {
  check_points(points);
  eta.validate();
  const auto cands = candidates_at_eta(points, eta.eta);
  const Selection sel = select_consistent_branch(cands);
  if (!std::isfinite(sel.rel_sd))
    throw NoSolutionError("some power point is not invertible at this eta");
  std::vector<kinetics::RateConstants> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i)
    out[i] = cands[i][sel.index[i]];
  return out;
}

namespace {

struct Wls {
  double slope, intercept, slope_err, intercept_err, chi2;
};

Wls weighted_line(const std::vector<double>& x, const std::vector<double>& y,
                  const std::vector<double>& w, bool scale_by_residuals) {
  double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
    sy += w[i] * y[i];
    sxx += w[i] * x[i] * x[i];
    sxy += w[i] * x[i] * y[i];
  }
  const double det = sw * sxx - sx * sx;
  const double xscale = std::max(sxx, 1e-300);
  if (!(det > 1e-12 * sw * xscale))
    throw ValidationError(
        "power regression is rank-deficient (all powers equal)");
  Wls out{};
  out.slope = (sw * sxy - sx * sy) / det;
  out.intercept = (sxx * sy - sx * sxy) / det;
  out.slope_err = std::sqrt(sw / det);
  out.intercept_err = std::sqrt(sxx / det);
  out.chi2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (out.slope * x[i] + out.intercept);
    out.chi2 += w[i] * r * r;
  }
  if (scale_by_residuals && x.size() > 2) {
    const double s = std::sqrt(out.chi2 / static_cast<double>(x.size() - 2));
    out.slope_err *= s;
    out.intercept_err *= s;
  }
  return out;
}

}  // namespace

PowerModelFit extract_power_model(const std::vector<PowerPoint>& points,
                                  const std::vector<RateSigmas>* sigmas) {
  if (points.size() < 3)
    throw ValidationError("power-model extraction needs at least 3 powers");
  if (sigmas && sigmas->size() != points.size())
    throw ValidationError("sigmas must align with points");
  const std::size_t n = points.size();
  std::vector<double> p(n), k12(n), k21(n), k23(n), k32(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!points[i].rates)
      throw ValidationError("power points must have rates filled");
    p[i] = points[i].power_mW;
    k12[i] = points[i].rates->k12;
    k21[i] = points[i].rates->k21;
    k23[i] = points[i].rates->k23;
    k32[i] = points[i].rates->k32;
  }
  auto weights = [&](auto member) {
    std::vector<double> w(n, 1.0);
    if (sigmas)
      for (std::size_t i = 0; i < n; ++i) {
        const double s = (*sigmas)[i].*member;
        w[i] = (s > 0.0) ? 1.0 / (s * s) : 1.0;
      }
    return w;
  };
  const bool unweighted = (sigmas == nullptr);

  const Wls f12 = weighted_line(p, k12, weights(&RateSigmas::k12), unweighted);
  const Wls f23 = weighted_line(p, k23, weights(&RateSigmas::k23), unweighted);
  const Wls f32 = weighted_line(p, k32, weights(&RateSigmas::k32), unweighted);

  const std::vector<double> w21 = weights(&RateSigmas::k21);
  double sw = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += w21[i];
    swy += w21[i] * k21[i];
  }
  const double k21_mean = swy / sw;
  double k21_err = std::sqrt(1.0 / sw);
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    spread += w21[i] * (k21[i] - k21_mean) * (k21[i] - k21_mean);
  spread = std::sqrt(spread / sw) / k21_mean;
  if (unweighted && n > 1)
    k21_err = spread * k21_mean / std::sqrt(static_cast<double>(n - 1));

  PowerModelFit out;
  out.k12 = {f12.slope, f12.intercept, f12.slope_err, f12.intercept_err};
  out.k23 = {f23.slope, f23.intercept, f23.slope_err, f23.intercept_err};
  out.k32 = {f32.slope, f32.intercept, f32.slope_err, f32.intercept_err};
  out.k21_err = k21_err;
  out.k21_rel_spread = spread;
  out.model.k12_slope = f12.slope;
  out.model.k12_intercept = f12.intercept;
  out.model.k23_slope = f23.slope;
  out.model.k23_intercept = f23.intercept;
  out.model.k32_slope = f32.slope;
  out.model.k32_intercept = f32.intercept;
  out.model.k21 = k21_mean;
  out.model.p_min_mW = *std::min_element(p.begin(), p.end());
  out.model.p_max_mW = *std::max_element(p.begin(), p.end());
  return out;
}

namespace {

/// sigma2_inf with rates clamped at zero and the shelf-free limit handled,
/// so the saturation model stays evaluable while LM explores.
double sigma2_inf_robust(double k12, double k21, double k23, double k32) {
  k12 = std::max(k12, 0.0);
  k23 = std::max(k23, 0.0);
  k32 = std::max(k32, 0.0);
  if (k12 == 0.0) return 0.0;
  const double den = k12 * k23 + k12 * k32 + k21 * k32;
  if (den > 0.0) return k12 * k32 / den;
  if (k23 == 0.0 && k32 == 0.0) return k12 / (k12 + k21);  // two-level limit
  return 0.0;
}

struct CoeffRef {
  const char* name;
  double kinetics::PowerModel::* member;
  bool SaturationOptions::* flag;
};

constexpr CoeffRef kCoeffs[] = {
    {"k12_slope", &kinetics::PowerModel::k12_slope,
     &SaturationOptions::free_k12_slope},
    {"k12_intercept", &kinetics::PowerModel::k12_intercept,
     &SaturationOptions::free_k12_intercept},
    {"k21", &kinetics::PowerModel::k21, &SaturationOptions::free_k21},
    {"k23_slope", &kinetics::PowerModel::k23_slope,
     &SaturationOptions::free_k23_slope},
    {"k23_intercept", &kinetics::PowerModel::k23_intercept,
     &SaturationOptions::free_k23_intercept},
    {"k32_slope", &kinetics::PowerModel::k32_slope,
     &SaturationOptions::free_k32_slope},
    {"k32_intercept", &kinetics::PowerModel::k32_intercept,
     &SaturationOptions::free_k32_intercept},
};

}  // namespace

SaturationFit fit_saturation(const std::vector<std::pair<double, double>>& data,
                             const kinetics::PowerModel& model_seed,
                             const kinetics::DetectionEfficiency& eta,
                             const SaturationOptions& options) {
  eta.validate();
  if (data.size() < 4)
    throw ValidationError("saturation fit needs at least 4 points");
  if (!(model_seed.k21 > 0.0))
    throw ValidationError("saturation seed model needs k21 > 0");
  std::vector<double> sigma(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!(data[i].second > 0.0))
      throw ValidationError("saturation counts must be > 0");
    sigma[i] = options.sigma_per_s
                   ? (*options.sigma_per_s)[i]
                   : std::sqrt(data[i].second);
    if (!(sigma[i] > 0.0))
      throw ValidationError("saturation sigmas must be > 0");
  }

  std::vector<const CoeffRef*> free;
  for (const CoeffRef& c : kCoeffs)
    if (options.*(c.flag)) free.push_back(&c);
  if (free.empty()) throw ValidationError("saturation fit has no free coefficients");

  kinetics::PowerModel model = model_seed;
  auto model_rate = [&](const kinetics::PowerModel& m, double pw) {
    const double k12 = m.k12_slope * pw + m.k12_intercept;
    const double k23 = m.k23_slope * pw + m.k23_intercept;
    const double k32 = m.k32_slope * pw + m.k32_intercept;
    return eta.eta * m.k21 *
           sigma2_inf_robust(k12, m.k21, k23, k32) * kinetics::kNsPerS;
  };

  std::vector<double> p0(free.size());
  for (std::size_t j = 0; j < free.size(); ++j) p0[j] = model.*(free[j]->member);
  const double coeff_scale = std::max(model_seed.k21, 1e-6);

  auto residual_fn = [&](const std::vector<double>& p, std::vector<double>& r,
                         std::vector<double>* jac) {
    kinetics::PowerModel m = model;
    for (std::size_t j = 0; j < free.size(); ++j) m.*(free[j]->member) = p[j];
    r.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < data.size(); ++i)
      r[i] = (model_rate(m, data[i].first) - data[i].second) / sigma[i];
    if (!jac) return;
    jac->assign(data.size() * free.size(), 0.0);
    for (std::size_t j = 0; j < free.size(); ++j) {
      const double h = 1e-6 * std::fabs(p[j]) + 1e-9 * coeff_scale;
      kinetics::PowerModel mp = m, mm = m;
      mp.*(free[j]->member) = p[j] + h;
      mm.*(free[j]->member) = p[j] - h;
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double d = (model_rate(mp, data[i].first) -
                          model_rate(mm, data[i].first)) /
                         (2.0 * h * sigma[i]);
        (*jac)[i * free.size() + j] = d;
      }
    }
  };

  detail::LmOptions lmopts;
  lmopts.max_iterations = options.max_iterations;
  const detail::LmOutcome lm = detail::levenberg_marquardt(residual_fn, p0, lmopts);

  SaturationFit out;
  for (std::size_t j = 0; j < free.size(); ++j) {
    model.*(free[j]->member) = lm.params[j];
    out.free_names.emplace_back(free[j]->name);
    out.free_values.push_back(lm.params[j]);
    out.free_errors.push_back(
        lm.covariance.size() == free.size() * free.size()
            ? std::sqrt(std::max(lm.covariance[j * free.size() + j], 0.0))
            : 0.0);
  }
  double pmin = data.front().first, pmax = data.front().first;
  for (const auto& [pw, cnt] : data) {
    pmin = std::min(pmin, pw);
    pmax = std::max(pmax, pw);
  }
  model.p_min_mW = std::min(model_seed.p_min_mW, pmin);
  model.p_max_mW = std::max(model_seed.p_max_mW, pmax);
  out.model = model;
  out.iterations = lm.iterations;
  out.converged = lm.converged;
  out.residual_norm = std::sqrt(lm.chi2);
  const std::size_t dof =
      (data.size() > free.size()) ? data.size() - free.size() : 1;
  out.reduced_chi2 = lm.chi2 / static_cast<double>(dof);
  for (const auto& [pw, cnt] : data) {
    out.predicted_per_s.push_back(model_rate(model, pw));
    const double k12 = model.k12_slope * pw + model.k12_intercept;
    out.reference_two_level_per_s.push_back(
        kinetics::two_level_count_rate(std::max(k12, 0.0), model.k21, eta));
  }
  return out;
}

}  // namespace g2kit::est

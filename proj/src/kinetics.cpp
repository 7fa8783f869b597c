#include "g2kit/kinetics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "detail/linalg.hpp"

namespace g2kit::kinetics {

namespace {

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

/// Denominator of the stationary solution, k12 k23 + k12 k32 + k21 k32.
double generator_det(const RateConstants& r) {
  return r.k12 * r.k23 + r.k12 * r.k32 + r.k21 * r.k32;
}

struct EigenPair {
  double fast;  ///< (k_tm + k_1m)/2, decay rate of the fast mode
  double slow;  ///< (k_tm - k_1m)/2, decay rate of the slow mode
};

EigenPair relaxation_rates(const RateConstants& r) {
  const double t = r.k12 + r.k21 + r.k23 + r.k32;
  const double d = r.k12 + r.k21 - r.k23 - r.k32;
  const double l = std::sqrt(d * d + 4.0 * r.k21 * r.k23);
  return {(t + l) / 2.0, (t - l) / 2.0};
}

}  // namespace

void RateConstants::validate() const {
  if (!finite_nonneg(k12) || !finite_nonneg(k21) || !finite_nonneg(k23) ||
      !finite_nonneg(k32))
    throw ValidationError("rate constants must be finite and >= 0");
  if (!(k21 > 0.0)) throw ValidationError("k21 must be > 0");
  if (!(k32 > 0.0)) throw ValidationError("k32 must be > 0");
}

bool RateConstants::is_valid() const noexcept {
  return finite_nonneg(k12) && finite_nonneg(k21) && finite_nonneg(k23) &&
         finite_nonneg(k32) && k21 > 0.0 && k32 > 0.0;
}

void Populations::validate() const {
  for (double v : {sigma1, sigma2, sigma3})
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw ValidationError("populations must lie in [0, 1]");
  if (std::fabs(sigma1 + sigma2 + sigma3 - 1.0) > 1e-12)
    throw ValidationError("populations must sum to 1 within 1e-12");
}

void DerivedParams::validate() const {
  if (!(std::isfinite(g_e) && std::isfinite(k_tm) && std::isfinite(k_1m) &&
        std::isfinite(sigma2_inf)))
    throw ValidationError("derived parameters must be finite");
  if (!(k_tm > 0.0)) throw ValidationError("k_tm must be > 0");
  if (!(k_1m >= 0.0 && k_1m < k_tm))
    throw ValidationError("k_1m must satisfy 0 <= k_1m < k_tm");
  if (!(sigma2_inf > 0.0 && sigma2_inf < 1.0))
    throw ValidationError("sigma2_inf must lie in (0, 1)");
}

void DetectionEfficiency::validate() const {
  if (!(std::isfinite(eta) && eta > 0.0 && eta <= 1.0))
    throw ValidationError("eta must lie in (0, 1]");
}

void PowerModel::validate() const {
  for (double v : {k12_slope, k12_intercept, k21, k23_slope, k23_intercept,
                   k32_slope, k32_intercept, p_min_mW, p_max_mW})
    if (!std::isfinite(v)) throw ValidationError("power model must be finite");
  if (!(k21 > 0.0)) throw ValidationError("power model k21 must be > 0");
  if (!(p_min_mW <= p_max_mW))
    throw ValidationError("power model range must have p_min <= p_max");
  for (double p : {p_min_mW, p_max_mW}) {
    // rates are affine in P, so checking the endpoints covers the range
    if (k12_slope * p + k12_intercept < 0.0 ||
        k23_slope * p + k23_intercept < 0.0 ||
        k32_slope * p + k32_intercept < 0.0)
      throw ValidationError("power model yields a negative rate in range");
  }
}

Populations stationary(const RateConstants& rates) {
  for (double v : {rates.k12, rates.k21, rates.k23, rates.k32})
    if (!finite_nonneg(v))
      throw ValidationError("rate constants must be finite and >= 0");
  const double den = generator_det(rates);
  if (!(den > 0.0))
    throw DegenerateSystemError(
        "rate generator is degenerate: k12*k23 + k12*k32 + k21*k32 == 0");
  // null vector of the generator, already normalized by construction
  return {rates.k21 * rates.k32 / den, rates.k12 * rates.k32 / den,
          rates.k12 * rates.k23 / den};
}

DerivedParams derived_from_rates(const RateConstants& rates) {
  rates.validate();
  const double d = rates.k12 + rates.k21 - rates.k23 - rates.k32;
  const double k_1m = std::sqrt(d * d + 4.0 * rates.k21 * rates.k23);
  if (!(k_1m > 0.0))
    throw DegenerateSystemError(
        "k_1m == 0: degenerate relaxation eigenvalues");
  DerivedParams out;
  out.k_tm = rates.k12 + rates.k21 + rates.k23 + rates.k32;
  out.k_1m = k_1m;
  out.g_e =
      (2.0 * rates.k12 * rates.k23 + rates.k32 * d) / (k_1m * rates.k32);
  out.sigma2_inf = stationary(rates).sigma2;
  return out;
}

Populations populations_at(const RateConstants& rates, double tau_ns,
                           const Populations& initial) {
  for (double v : {rates.k12, rates.k21, rates.k23, rates.k32})
    if (!finite_nonneg(v))
      throw ValidationError("rate constants must be finite and >= 0");
  initial.validate();
  if (!(tau_ns >= 0.0)) throw ValidationError("tau must be >= 0");
  if (tau_ns == 0.0) return initial;

  const double sum = rates.k12 + rates.k21 + rates.k23 + rates.k32;
  if (sum == 0.0) return initial;  // frozen system
  const double den = generator_det(rates);
  if (!(den > 0.0))
    throw DegenerateSystemError("rate generator has no unique fixed point");

  // Reduced system in y = (sigma2, sigma3) with sigma1 = 1 - sigma2 - sigma3:
  //   y' = A y + b,  A = [[-(k12+k21+k23), k32-k12], [k23, -k32]],
  // whose eigenvalues are -(k_tm +- k_1m)/2.
  const double a11 = -(rates.k12 + rates.k21 + rates.k23);
  const double a12 = rates.k32 - rates.k12;
  const double a21 = rates.k23;
  const double a22 = -rates.k32;

  const Populations st = stationary(rates);
  const double z2 = initial.sigma2 - st.sigma2;
  const double z3 = initial.sigma3 - st.sigma3;

  const auto [rf, rs] = relaxation_rates(rates);
  const double mu = -(rf + rs) / 2.0;  // mean eigenvalue
  const double nu = (rf - rs) / 2.0;   // half-splitting, k_1m/2

  // exp(A tau) applied to z, two numerically complementary forms
  double e2, e3;
  if (nu * tau_ns < 0.5) {
    // near-degenerate splitting: exp(mu t) (cosh(nu t) I + sinhc * t (A-mu))
    const double emu = std::exp(mu * tau_ns);
    const double x = nu * tau_ns;
    const double ch = std::cosh(x);
    const double shc = (x == 0.0) ? 1.0 : std::sinh(x) / x;  // sinhc
    const double f = shc * tau_ns;
    e2 = emu * (ch * z2 + f * ((a11 - mu) * z2 + a12 * z3));
    e3 = emu * (ch * z3 + f * (a21 * z2 + (a22 - mu) * z3));
  } else {
    // spectral form: ((A + rf I) e^{-rs t} - (A + rs I) e^{-rf t}) / (rf - rs)
    const double es = std::exp(-rs * tau_ns);
    const double ef = std::exp(-rf * tau_ns);
    const double inv = 1.0 / (rf - rs);
    e2 = inv * (es * ((a11 + rf) * z2 + a12 * z3) -
                ef * ((a11 + rs) * z2 + a12 * z3));
    e3 = inv * (es * (a21 * z2 + (a22 + rf) * z3) -
                ef * (a21 * z2 + (a22 + rs) * z3));
  }

  Populations out;
  out.sigma2 = clamp01(st.sigma2 + e2);
  out.sigma3 = clamp01(st.sigma3 + e3);
  out.sigma1 = clamp01(1.0 - out.sigma2 - out.sigma3);
  return out;
}

double g2_analytic(const RateConstants& rates, double tau_ns) {
  if (!(tau_ns >= 0.0)) throw ValidationError("tau must be >= 0");
  const DerivedParams d = derived_from_rates(rates);
  const double rs = (d.k_tm - d.k_1m) / 2.0;
  const double a = (1.0 + d.g_e) / 2.0;
  // 1 - e_s + a (e_s - e_f), arranged so tau == 0 gives exactly 0
  return -std::expm1(-rs * tau_ns) -
         a * std::exp(-rs * tau_ns) * std::expm1(-d.k_1m * tau_ns);
}

double g2_bin_average(const RateConstants& rates, double tau_lo_ns,
                      double tau_hi_ns) {
  if (!(tau_hi_ns > tau_lo_ns) || tau_lo_ns < 0.0)
    throw ValidationError("bin average needs 0 <= tau_lo < tau_hi");
  const DerivedParams d = derived_from_rates(rates);
  const double rf = (d.k_tm + d.k_1m) / 2.0;
  const double rs = (d.k_tm - d.k_1m) / 2.0;
  const double a = (1.0 + d.g_e) / 2.0;
  const double b = (1.0 - d.g_e) / 2.0;
  const double w = tau_hi_ns - tau_lo_ns;
  // integral of exp(-r tau) over the bin / width
  auto mean_exp = [w](double r, double lo) {
    if (r == 0.0) return 1.0;
    return -std::exp(-r * lo) * std::expm1(-r * w) / (r * w);
  };
  return 1.0 - a * mean_exp(rf, tau_lo_ns) - b * mean_exp(rs, tau_lo_ns);
}

namespace {

/// Relative residual of derived_from_rates(r) against a target, plus an
/// optional brightness constraint Q = k21 * sigma2_inf.
struct InversionTarget {
  double g_e, k_tm, k_1m;
  // exactly one of these is active
  double sigma2_inf = -1.0;
  double q = -1.0;  // k21 * sigma2_inf, ns^-1

  std::array<double, 4> residual(const RateConstants& r) const {
    const double t = r.k12 + r.k21 + r.k23 + r.k32;
    const double d = r.k12 + r.k21 - r.k23 - r.k32;
    const double l = std::sqrt(d * d + 4.0 * r.k21 * r.k23);
    const double ge = (2.0 * r.k12 * r.k23 + r.k32 * d) / (l * r.k32);
    const double den = r.k12 * r.k23 + r.k12 * r.k32 + r.k21 * r.k32;
    const double s2 = r.k12 * r.k32 / den;
    const double gescale = std::max(std::fabs(g_e), 1.0);
    double fourth;
    if (sigma2_inf > 0.0)
      fourth = (s2 - sigma2_inf) / sigma2_inf;
    else
      fourth = (r.k21 * s2 - q) / q;
    return {(t - k_tm) / k_tm, (l - k_1m) / k_1m, (ge - g_e) / gescale,
            fourth};
  }
};

double max_abs(const std::array<double, 4>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

/// Damped Newton refinement with positivity guards.  Returns the polished
/// rates; quality is judged afterwards by the forward residual.
RateConstants newton_polish(RateConstants r, const InversionTarget& tgt) {
  auto valid = [](const RateConstants& k) {
    return k.k12 >= 0.0 && k.k21 > 0.0 && k.k23 >= 0.0 && k.k32 > 0.0;
  };
  if (!valid(r)) return r;
  std::array<double, 4> f = tgt.residual(r);
  double fn = max_abs(f);
  for (int iter = 0; iter < 30 && fn > 1e-13; ++iter) {
    // forward-difference Jacobian
    std::vector<double> jac(16);
    std::array<double*, 4> fields = {&r.k12, &r.k21, &r.k23, &r.k32};
    for (int j = 0; j < 4; ++j) {
      const double orig = *fields[j];
      const double h = 1e-7 * (std::fabs(orig) + 1e-6 * tgt.k_tm);
      *fields[j] = orig + h;
      const auto fp = tgt.residual(r);
      *fields[j] = orig;
      for (int i = 0; i < 4; ++i) jac[i * 4 + j] = (fp[i] - f[i]) / h;
    }
    std::vector<double> rhs = {-f[0], -f[1], -f[2], -f[3]};
    std::vector<double> step;
    if (!g2kit::detail::solve_lu(jac, rhs, step)) break;
    double alpha = 1.0;
    bool improved = false;
    for (int halve = 0; halve < 25; ++halve) {
      RateConstants cand = r;
      cand.k12 += alpha * step[0];
      cand.k21 += alpha * step[1];
      cand.k23 += alpha * step[2];
      cand.k32 += alpha * step[3];
      if (valid(cand)) {
        const auto fc = tgt.residual(cand);
        const double fcn = max_abs(fc);
        if (fcn < fn) {
          r = cand;
          f = fc;
          fn = fcn;
          improved = true;
          break;
        }
      }
      alpha /= 2.0;
    }
    if (!improved) break;
  }
  return r;
}

bool matches_target(const RateConstants& r, const InversionTarget& tgt,
                    double tol) {
  if (!(r.k12 >= 0.0 && r.k21 > 0.0 && r.k23 >= 0.0 && r.k32 > 0.0))
    return false;
  return max_abs(tgt.residual(r)) <= tol;
}

}  // namespace

RateConstants rates_from_derived(const DerivedParams& derived) {
  derived.validate();
  const double t = derived.k_tm;
  const double l = derived.k_1m;
  const double ge = derived.g_e;
  const double s2 = derived.sigma2_inf;

  const double dd = (t * t - l * l) / 4.0;  // stationary denominator
  const double den = t + ge * l;
  if (!(den > 0.0))
    throw NoSolutionError("k_tm + g_e*k_1m <= 0: not realizable");

  RateConstants r;
  r.k32 = 2.0 * dd / den;
  r.k12 = s2 * den / 2.0;
  const double rest = t - r.k12 - r.k32;  // k21 + k23
  if (!(rest > 0.0))
    throw NoSolutionError("implied k21 + k23 <= 0: not realizable");
  const double c = r.k12 - r.k32;

  InversionTarget tgt{ge, t, l, s2, -1.0};
  if (std::fabs(c) <= 1e-9 * t) {
    // Degenerate manifold: with k12 == k32 the observables are invariant
    // under any split of k21 + k23 (g_e == 1 there), so either nothing or
    // a continuum solves the system.
    if (std::fabs(l * l - c * c - rest * rest) <= 1e-9 * t * t) {
      std::vector<RateConstants> cands;
      RateConstants c1 = r;  // two-level representative
      c1.k21 = rest;
      c1.k23 = 0.0;
      RateConstants c2 = r;  // even-split representative
      c2.k21 = rest / 2.0;
      c2.k23 = rest / 2.0;
      for (RateConstants cand : {c1, c2})
        if (matches_target(cand, tgt, 1e-9)) cands.push_back(cand);
      if (!cands.empty())
        throw AmbiguousSolutionError(
            "k12 == k32: a continuum of k21+k23 splits matches; "
            "representative candidates reported",
            cands);
    }
    throw NoSolutionError("degenerate k12 == k32 target is not realizable");
  }

  double x = (l * l - c * c - rest * rest) / (2.0 * c);  // k21 - k23
  x = std::min(rest, std::max(-rest, x));
  r.k21 = (rest + x) / 2.0;
  r.k23 = (rest - x) / 2.0;
  if (r.k23 < 1e-12 * t) r.k23 = 0.0;  // roundoff from exact two-level targets
  if (!(r.k21 > 0.0))
    throw NoSolutionError("implied k21 <= 0: not realizable");

  r = newton_polish(r, tgt);
  if (!matches_target(r, tgt, 1e-9))
    throw NoSolutionError(
        "no positive rate tuple reproduces the derived parameters");
  return r;
}

std::vector<RateConstants> observable_rate_candidates(
    double g_e, double k_tm, double k_1m, double brightness_per_s,
    const DetectionEfficiency& eta) {
  eta.validate();
  if (!(brightness_per_s > 0.0) || !std::isfinite(brightness_per_s))
    throw ValidationError("brightness must be > 0");
  if (!(k_tm > 0.0 && k_1m >= 0.0 && k_1m < k_tm && std::isfinite(g_e)))
    throw ValidationError("invalid shape parameters");

  const double q = brightness_per_s / eta.eta / kNsPerS;  // k21*sigma2_inf
  const double dd = (k_tm * k_tm - k_1m * k_1m) / 4.0;
  const double den = k_tm + g_e * k_1m;
  if (!(den > 0.0)) return {};
  const double k32 = 2.0 * dd / den;
  const double a = den / 2.0;  // k12 = a * sigma2_inf

  // Substituting k12 = a s, k21 = q/s, k23 = k_tm - k32 - k12 - k21 into the
  // k_1m equation gives a cubic in s = sigma2_inf:
  //   a^2 s^3 - a k_tm s^2 + (dd + a q) s - q k32 = 0
  const auto roots =
      g2kit::detail::cubic_real_roots(a * a, -a * k_tm, dd + a * q, -q * k32);

  InversionTarget tgt{g_e, k_tm, k_1m, -1.0, q};
  std::vector<RateConstants> out;
  for (double s : roots) {
    if (!(s > 0.0 && s < 1.0)) continue;
    RateConstants r;
    r.k32 = k32;
    r.k12 = a * s;
    r.k21 = q / s;
    r.k23 = k_tm - k32 - r.k12 - r.k21;
    if (r.k23 < 0.0) {
      if (r.k23 < -1e-9 * k_tm) continue;
      r.k23 = 0.0;
    }
    if (!(r.k21 > 0.0)) continue;
    r = newton_polish(r, tgt);
    if (!matches_target(r, tgt, 1e-9)) continue;
    const bool dup =
        std::any_of(out.begin(), out.end(), [&](const RateConstants& o) {
          auto close = [&](double x, double y) {
            return std::fabs(x - y) <= 1e-6 * (std::fabs(x) + 1e-30);
          };
          return close(o.k12, r.k12) && close(o.k21, r.k21) &&
                 close(o.k23, r.k23) && close(o.k32, r.k32);
        });
    if (!dup) out.push_back(r);
  }
  std::sort(out.begin(), out.end(),
            [](const RateConstants& x, const RateConstants& y) {
              return x.k12 < y.k12;
            });
  return out;
}

RateConstants rates_from_observables(double g_e, double k_tm, double k_1m,
                                     double brightness_per_s,
                                     const DetectionEfficiency& eta) {
  auto cands =
      observable_rate_candidates(g_e, k_tm, k_1m, brightness_per_s, eta);
  if (cands.empty())
    throw NoSolutionError(
        "no positive rate tuple reproduces the observables at this "
        "brightness and efficiency");
  if (cands.size() > 1) {
    std::ostringstream msg;
    msg << cands.size()
        << " physical rate tuples reproduce the observables; "
           "disambiguate with an external constraint (e.g. k21 constancy "
           "across pump powers)";
    throw AmbiguousSolutionError(msg.str(), std::move(cands));
  }
  return cands.front();
}

double count_rate(const RateConstants& rates, const DetectionEfficiency& eta) {
  eta.validate();
  return eta.eta * rates.k21 * stationary(rates).sigma2 * kNsPerS;
}

double two_level_count_rate(double k12, double k21,
                            const DetectionEfficiency& eta) {
  eta.validate();
  if (!(k21 > 0.0) || k12 < 0.0)
    throw ValidationError("two-level rates need k21 > 0 and k12 >= 0");
  if (k12 == 0.0) return 0.0;
  return eta.eta * k21 * k12 / (k12 + k21) * kNsPerS;
}

RateConstants rates_at_power(const PowerModel& model, double power_mW) {
  model.validate();
  if (!(power_mW >= model.p_min_mW && power_mW <= model.p_max_mW))
    throw ValidationError("power outside the model's validity range");
  RateConstants r;
  r.k12 = model.k12_slope * power_mW + model.k12_intercept;
  r.k21 = model.k21;
  r.k23 = model.k23_slope * power_mW + model.k23_intercept;
  r.k32 = model.k32_slope * power_mW + model.k32_intercept;
  if (r.k12 < 0.0 || r.k23 < 0.0 || r.k32 < 0.0)
    throw ValidationError("power model yields a negative rate at this power");
  return r;
}

}  // namespace g2kit::kinetics

#pragma once

// Damped Gauss-Newton / Levenberg-Marquardt least squares on weighted
// residuals, with the Nielsen lambda update.  The model callback fills the
// residual vector and (optionally) the Jacobian; parameter count is small.

#include <cmath>
#include <functional>
#include <vector>

#include "detail/linalg.hpp"

namespace g2kit::detail {

struct LmOptions {
  int max_iterations = 200;
  double step_tol = 1e-10;      // relative step size
  double residual_tol = 1e-12;  // relative chi2 change
};

struct LmOutcome {
  std::vector<double> params;
  std::vector<double> covariance;  // (J^T J)^-1, row-major p x p
  double chi2 = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// residual_fn(params, residuals, jacobian_or_null).  The Jacobian is
/// row-major n_res x n_par of d residual_i / d param_j.
using LmResidualFn = std::function<void(const std::vector<double>&,
                                        std::vector<double>&,
                                        std::vector<double>*)>;

inline LmOutcome levenberg_marquardt(const LmResidualFn& fn,
                                     std::vector<double> params,
                                     const LmOptions& opts = {}) {
  const std::size_t p = params.size();
  std::vector<double> res, jac;
  fn(params, res, &jac);
  const std::size_t n = res.size();

  auto chi2_of = [](const std::vector<double>& r) {
    double s = 0.0;
    for (double v : r) s += v * v;
    return s;
  };
  double chi2 = chi2_of(res);

  // J^T J and J^T r
  std::vector<double> jtj(p * p), jtr(p);
  auto build_normal = [&]() {
    std::fill(jtj.begin(), jtj.end(), 0.0);
    std::fill(jtr.begin(), jtr.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < p; ++a) {
        const double ja = jac[i * p + a];
        if (ja == 0.0) continue;
        jtr[a] += ja * res[i];
        for (std::size_t b = a; b < p; ++b) jtj[a * p + b] += ja * jac[i * p + b];
      }
    }
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = 0; b < a; ++b) jtj[a * p + b] = jtj[b * p + a];
  };
  build_normal();

  double max_diag = 0.0;
  for (std::size_t a = 0; a < p; ++a) max_diag = std::max(max_diag, jtj[a * p + a]);
  double lambda = 1e-3 * (max_diag > 0.0 ? max_diag : 1.0);
  double nu = 2.0;

  LmOutcome out;
  out.params = params;
  out.chi2 = chi2;

  for (int iter = 1; iter <= opts.max_iterations; ++iter) {
    out.iterations = iter;
    std::vector<double> lhs = jtj;
    for (std::size_t a = 0; a < p; ++a) lhs[a * p + a] += lambda;
    std::vector<double> rhs(p);
    for (std::size_t a = 0; a < p; ++a) rhs[a] = -jtr[a];
    std::vector<double> step;
    if (!solve_lu(lhs, rhs, step)) {
      lambda *= 10.0;
      nu = 2.0;
      continue;
    }

    std::vector<double> trial = params;
    double step_rel = 0.0;
    for (std::size_t a = 0; a < p; ++a) {
      trial[a] += step[a];
      step_rel = std::max(step_rel,
                          std::fabs(step[a]) / (std::fabs(params[a]) + 1.0));
    }

    std::vector<double> res_t, jac_t;
    fn(trial, res_t, &jac_t);
    const double chi2_t = chi2_of(res_t);

    if (std::isfinite(chi2_t) && chi2_t < chi2) {
      const double rel_drop = (chi2 - chi2_t) / std::max(chi2, 1e-300);
      params = trial;
      res = std::move(res_t);
      jac = std::move(jac_t);
      chi2 = chi2_t;
      build_normal();
      lambda = std::max(lambda / 3.0, 1e-300);
      nu = 2.0;
      out.params = params;
      out.chi2 = chi2;
      if (step_rel < opts.step_tol || rel_drop < opts.residual_tol) {
        out.converged = true;
        break;
      }
    } else {
      lambda *= nu;
      nu *= 2.0;
      if (step_rel < opts.step_tol) {
        // stuck at a minimum the damping cannot improve
        out.converged = true;
        break;
      }
      if (!std::isfinite(lambda) || lambda > 1e300) break;
    }
  }

  out.params = params;
  out.chi2 = chi2;
  invert_spd(jtj, out.covariance);
  return out;
}

}  // namespace g2kit::detail

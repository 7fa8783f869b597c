#pragma once

// Small dense linear-algebra helpers for the fixed-size systems in this
// project (Newton polishes, least-squares normal equations).  Matrices are
// row-major in flat vectors.

#include <cmath>
#include <cstddef>
#include <vector>

#include "g2kit/errors.hpp"

namespace g2kit::detail {

/// Solve A x = b in place via Gaussian elimination with partial pivoting.
/// Returns false if the matrix is numerically singular.
inline bool solve_lu(std::vector<double> a, std::vector<double> b,
                     std::vector<double>& x) {
  const std::size_t n = b.size();
  x.assign(n, 0.0);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::fabs(a[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::fabs(a[r * n + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best > 0.0) || !std::isfinite(best)) return false;
    if (piv != col) {
      for (std::size_t c = col; c < n; ++c)
        std::swap(a[piv * n + c], a[col * n + c]);
      std::swap(b[piv], b[col]);
    }
    const double d = a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / d;
      if (f == 0.0) continue;
      for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
      b[r] -= f * b[col];
    }
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < n; ++c) s -= a[i * n + c] * x[c];
    x[i] = s / a[i * n + i];
    if (!std::isfinite(x[i])) return false;
  }
  return true;
}

/// Invert a symmetric positive (semi)definite matrix; adds a relative
/// ridge on near-singular pivots so covariance reporting stays defined.
inline bool invert_spd(std::vector<double> a, std::vector<double>& inv) {
  const std::size_t n = static_cast<std::size_t>(std::lround(
      std::sqrt(static_cast<double>(a.size()))));
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    scale = std::max(scale, std::fabs(a[i * n + i]));
  if (scale == 0.0) scale = 1.0;
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1e-14 * scale;

  inv.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) inv[i * n + i] = 1.0;
  // Gauss-Jordan with partial pivoting.
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    double best = std::fabs(a[col * n + col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double v = std::fabs(a[r * n + col]);
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (!(best > 0.0) || !std::isfinite(best)) return false;
    if (piv != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a[piv * n + c], a[col * n + c]);
        std::swap(inv[piv * n + c], inv[col * n + c]);
      }
    }
    const double d = a[col * n + col];
    for (std::size_t c = 0; c < n; ++c) {
      a[col * n + c] /= d;
      inv[col * n + c] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a[r * n + col];
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        a[r * n + c] -= f * a[col * n + c];
        inv[r * n + c] -= f * inv[col * n + c];
      }
    }
  }
  return true;
}

/// Real roots of c3 x^3 + c2 x^2 + c1 x + c0 = 0 (c3 != 0), each refined
/// by a couple of Newton steps.
inline std::vector<double> cubic_real_roots(double c3, double c2, double c1,
                                            double c0) {
  const double a = c2 / c3, b = c1 / c3, c = c0 / c3;
  // depressed cubic t^3 + p t + q with x = t - a/3
  const double p = b - a * a / 3.0;
  const double q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
  std::vector<double> roots;
  const double disc = q * q / 4.0 + p * p * p / 27.0;
  if (disc > 0.0) {
    const double s = std::sqrt(disc);
    const double u = std::cbrt(-q / 2.0 + s);
    const double v = std::cbrt(-q / 2.0 - s);
    roots.push_back(u + v - a / 3.0);
  } else if (p == 0.0 && q == 0.0) {
    roots.push_back(-a / 3.0);
  } else {
    // three real roots; trigonometric form
    const double m = 2.0 * std::sqrt(-p / 3.0);
    double arg = 3.0 * q / (p * m);
    arg = std::min(1.0, std::max(-1.0, arg));
    const double theta = std::acos(arg) / 3.0;
    for (int k = 0; k < 3; ++k)
      roots.push_back(m * std::cos(theta - 2.0 * M_PI * k / 3.0) - a / 3.0);
  }
  auto f = [&](double x) { return ((c3 * x + c2) * x + c1) * x + c0; };
  auto fp = [&](double x) { return (3.0 * c3 * x + 2.0 * c2) * x + c1; };
  for (double& r : roots) {
    for (int it = 0; it < 3; ++it) {
      const double d = fp(r);
      if (d == 0.0) break;
      const double step = f(r) / d;
      if (!std::isfinite(step)) break;
      r -= step;
    }
  }
  return roots;
}

}  // namespace g2kit::detail

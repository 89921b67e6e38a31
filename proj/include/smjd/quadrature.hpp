// Quadrature rules: Gauss-Hermite, Gauss-Legendre and composite Simpson.
#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <mutex>
#include <numbers>
#include <vector>

#include "smjd/core.hpp"

namespace smjd::quad {

struct Rule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

// Newton iteration on the orthonormal Hermite recurrence (Golub-Welsch-free
// variant of the classic gauher routine).
inline Rule compute_gauss_hermite(int n) {
  Rule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  const double pim4 = 0.7511255444649425;  // pi^(-1/4)
  const int m = (n + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < m; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
    } else if (i == 1) {
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * rule.nodes[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * rule.nodes[1];
    } else {
      z = 2.0 * z - rule.nodes[i - 2];
    }
    double pp = 0.0;
    bool converged = false;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = pim4;
      double p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15 * std::max(1.0, std::abs(z))) {
        converged = true;
        break;
      }
    }
    if (!converged) throw NumericalError("Gauss-Hermite node iteration did not converge");
    rule.nodes[i] = z;
    rule.nodes[n - 1 - i] = -z;
    rule.weights[i] = 2.0 / (pp * pp);
    rule.weights[n - 1 - i] = rule.weights[i];
  }
  return rule;
}

inline Rule compute_gauss_legendre(int n) {
  Rule rule;
  rule.nodes.assign(n, 0.0);
  rule.weights.assign(n, 0.0);
  const int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = 1.0;
      double p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j + 1.0) * z * p2 - j * p3) / (j + 1);
      }
      pp = n * (z * p1 - p2) / (z * z - 1.0);
      double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) <= 1e-15) break;
    }
    rule.nodes[i] = -z;
    rule.nodes[n - 1 - i] = z;
    rule.weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    rule.weights[n - 1 - i] = rule.weights[i];
  }
  return rule;
}

template <class Compute>
const Rule& cached(int n, Compute compute) {
  static std::mutex mutex;
  static std::map<int, Rule> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, compute(n)).first;
  return it->second;
}

}  // namespace detail

/// Physicists' Gauss-Hermite rule: sum w_k f(x_k) ~ integral of exp(-x^2) f(x).
inline const Rule& gauss_hermite(int n) {
  require(n >= 1 && n <= 512, "Gauss-Hermite order must be in [1, 512]");
  return detail::cached(n, [](int k) { return detail::compute_gauss_hermite(k); });
}

/// Gauss-Legendre rule on [-1, 1].
inline const Rule& gauss_legendre(int n) {
  require(n >= 1 && n <= 512, "Gauss-Legendre order must be in [1, 512]");
  return detail::cached(n + 100000, [n](int) { return detail::compute_gauss_legendre(n); });
}

/// Composite Simpson nodes and weights on [a, b] with an even number of intervals.
inline Rule simpson_rule(double a, double b, int intervals) {
  require(intervals >= 2 && intervals % 2 == 0, "Simpson needs an even number of intervals");
  Rule rule;
  double h = (b - a) / intervals;
  rule.nodes.resize(intervals + 1);
  rule.weights.resize(intervals + 1);
  for (int k = 0; k <= intervals; ++k) {
    rule.nodes[k] = a + k * h;
    double c = (k == 0 || k == intervals) ? 1.0 : (k % 2 == 1 ? 4.0 : 2.0);
    rule.weights[k] = c * h / 3.0;
  }
  rule.nodes[intervals] = b;
  return rule;
}

template <class F>
double simpson(F&& f, double a, double b, int intervals) {
  if (b == a) return 0.0;
  double h = (b - a) / intervals;
  double sum = f(a) + f(b);
  for (int k = 1; k < intervals; ++k) sum += (k % 2 == 1 ? 4.0 : 2.0) * f(a + k * h);
  return sum * h / 3.0;
}

}  // namespace smjd::quad

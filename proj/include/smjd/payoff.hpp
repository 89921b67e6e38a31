// European path-independent payoffs K(s) with at most linear growth.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "smjd/core.hpp"

namespace smjd {

enum class PayoffKind { call, put, butterfly, linear, constant, tabulated };

struct PayoffSpec {
  PayoffKind kind = PayoffKind::call;
  double k1 = 100.0;
  double k2 = 0.0;
  double k3 = 0.0;
  double level = 1.0;  ///< value of the constant payoff
  std::vector<double> s_table;
  std::vector<double> k_table;

  static PayoffSpec call(double strike) { return {PayoffKind::call, strike}; }
  static PayoffSpec put(double strike) { return {PayoffKind::put, strike}; }
  static PayoffSpec butterfly(double a, double b, double c) { return {PayoffKind::butterfly, a, b, c}; }
  static PayoffSpec linear() { return {PayoffKind::linear, 0.0}; }
  static PayoffSpec constant(double level = 1.0) {
    PayoffSpec p{PayoffKind::constant, 0.0};
    p.level = level;
    return p;
  }
  /// Piecewise-linear in s through the table, continued linearly beyond it.
  static PayoffSpec tabulated(std::vector<double> s, std::vector<double> k) {
    PayoffSpec p{PayoffKind::tabulated, 0.0};
    p.s_table = std::move(s);
    p.k_table = std::move(k);
    p.validate();
    return p;
  }

  void validate() const {
    switch (kind) {
      case PayoffKind::call:
      case PayoffKind::put:
        require(std::isfinite(k1) && k1 >= 0.0, "strike must be finite and nonnegative");
        break;
      case PayoffKind::butterfly:
        require(k1 < k2 && k2 < k3, "butterfly strikes must satisfy K1 < K2 < K3");
        break;
      case PayoffKind::linear:
        break;
      case PayoffKind::constant:
        require(std::isfinite(level), "constant payoff must be finite");
        break;
      case PayoffKind::tabulated:
        require(s_table.size() >= 2 && s_table.size() == k_table.size(), "payoff table needs >= 2 matching points");
        for (std::size_t n = 0; n < s_table.size(); ++n) {
          require(std::isfinite(s_table[n]) && std::isfinite(k_table[n]), "payoff table must be finite");
          if (n > 0) require(s_table[n] > s_table[n - 1], "payoff table s must be strictly increasing");
        }
        break;
    }
  }

  double operator()(double s) const {
    switch (kind) {
      case PayoffKind::call: return std::max(s - k1, 0.0);
      case PayoffKind::put: return std::max(k1 - s, 0.0);
      case PayoffKind::butterfly: {
        double left = std::max(s - k1, 0.0);
        double mid = std::max(s - k2, 0.0);
        double right = std::max(s - k3, 0.0);
        // Long K1, long K3, short enough K2 calls to be flat zero beyond K3.
        double a = (k3 - k2) / (k3 - k1);
        double c = (k2 - k1) / (k3 - k1);
        return a * left - mid + c * right;
      }
      case PayoffKind::linear: return s;
      case PayoffKind::constant: return level;
      case PayoffKind::tabulated: {
        const auto& x = s_table;
        const auto& y = k_table;
        std::size_t k;
        if (s <= x.front()) {
          k = 0;
        } else if (s >= x.back()) {
          k = x.size() - 2;
        } else {
          k = static_cast<std::size_t>(std::upper_bound(x.begin(), x.end(), s) - x.begin()) - 1;
        }
        return y[k] + (y[k + 1] - y[k]) * (s - x[k]) / (x[k + 1] - x[k]);
      }
    }
    return kNaN;
  }

  /// Lipschitz constant of K.
  double lipschitz() const {
    switch (kind) {
      case PayoffKind::call:
      case PayoffKind::put:
      case PayoffKind::linear: return 1.0;
      case PayoffKind::butterfly: return std::max(k3 - k2, k2 - k1) / (k3 - k1);
      case PayoffKind::constant: return 0.0;
      case PayoffKind::tabulated: {
        double l = 0.0;
        for (std::size_t n = 1; n < s_table.size(); ++n)
          l = std::max(l, std::abs((k_table[n] - k_table[n - 1]) / (s_table[n] - s_table[n - 1])));
        return l;
      }
    }
    return kNaN;
  }

  /// Prices where K is not differentiable.
  std::vector<double> kinks() const {
    switch (kind) {
      case PayoffKind::call:
      case PayoffKind::put: return {k1};
      case PayoffKind::butterfly: return {k1, k2, k3};
      case PayoffKind::tabulated: return s_table;
      default: return {};
    }
  }

  std::string name() const {
    switch (kind) {
      case PayoffKind::call: return "call";
      case PayoffKind::put: return "put";
      case PayoffKind::butterfly: return "butterfly";
      case PayoffKind::linear: return "linear";
      case PayoffKind::constant: return "constant";
      case PayoffKind::tabulated: return "tabulated";
    }
    return "?";
  }
};

}  // namespace smjd

// Uniform log-price grids and the translation-invariant stencils built on
// them: linear-in-s ghost extension, monotone cubic Hermite slopes, shifted
// linear interpolation (jump terms) and Gaussian expectation stencils.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/quadrature.hpp"

namespace smjd {

/// x_k = x_lo + k dx, s_k = exp(x_k), k = 0..n-1.
struct LogGrid {
  double x_lo = 0.0;
  double dx = 0.0;
  std::size_t n = 0;

  double x(std::size_t k) const { return x_lo + static_cast<double>(k) * dx; }
  double s(std::size_t k) const { return std::exp(x(k)); }
  double x_hi() const { return x(n - 1); }
  double s_min() const { return std::exp(x_lo); }
  double s_max() const { return std::exp(x_hi()); }

  /// Node index nearest to ln s.
  std::size_t nearest(double s_value) const {
    double u = (std::log(s_value) - x_lo) / dx;
    long k = std::lround(u);
    return static_cast<std::size_t>(std::clamp<long>(k, 0, static_cast<long>(n) - 1));
  }

  /// Halves dx keeping x_lo (every old node stays a node).
  LogGrid refined() const { return LogGrid{x_lo, 0.5 * dx, 2 * (n - 1) + 1}; }
};

/// Grid with n nodes covering [x_lo, x_hi] approximately, with ln(s_ref)
/// placed exactly on a node.
inline LogGrid make_log_grid(double s_ref, double x_lo, double x_hi, std::size_t n) {
  require(n >= 5, "log grid needs at least 5 nodes");
  require(s_ref > 0.0, "reference price must be positive");
  const double xr = std::log(s_ref);
  require(x_lo < xr && xr < x_hi, "reference price must lie inside the grid range");
  double ratio = (xr - x_lo) / (x_hi - x_lo);
  long below = std::lround(ratio * static_cast<double>(n - 1));
  below = std::clamp<long>(below, 1, static_cast<long>(n) - 2);
  double dx = (xr - x_lo) / static_cast<double>(below);
  return LogGrid{x_lo, dx, n};
}

// ---------------------------------------------------------------------------
// Ghost extension and slopes
// ---------------------------------------------------------------------------

/// Copies `row` into `out` with `ghosts` extra nodes on each side whose values
/// continue the end segments linearly in s (not in ln s).
inline void pad_row(double dx, std::span<const double> row, std::size_t ghosts, std::vector<double>& out) {
  const std::size_t n = row.size();
  out.resize(n + 2 * ghosts);
  std::copy(row.begin(), row.end(), out.begin() + static_cast<std::ptrdiff_t>(ghosts));
  const double left_slope = (row[1] - row[0]) / std::expm1(dx);          // per unit of s / s_0
  const double right_slope = (row[n - 1] - row[n - 2]) / -std::expm1(-dx);  // per unit of s / s_{n-1}
  for (std::size_t g = 1; g <= ghosts; ++g) {
    double gd = static_cast<double>(g) * dx;
    out[ghosts - g] = row[0] + left_slope * std::expm1(-gd);
    out[ghosts + n - 1 + g] = row[n - 1] + right_slope * std::expm1(gd);
  }
}

/// Monotone (Fritsch-Carlson, harmonic-mean) node slopes in index units.
inline void monotone_slopes(std::span<const double> values, std::vector<double>& slopes) {
  const std::size_t n = values.size();
  slopes.resize(n);
  if (n < 2) {
    std::fill(slopes.begin(), slopes.end(), 0.0);
    return;
  }
  slopes[0] = values[1] - values[0];
  slopes[n - 1] = values[n - 1] - values[n - 2];
  for (std::size_t k = 1; k + 1 < n; ++k) {
    double d0 = values[k] - values[k - 1];
    double d1 = values[k + 1] - values[k];
    slopes[k] = (d0 * d1 > 0.0) ? 2.0 * d0 * d1 / (d0 + d1) : 0.0;
  }
}

/// Value at ln s = x: linear in ln s between nodes, linear in s outside.
inline double interp_linear(const LogGrid& grid, std::span<const double> row, double x) {
  const std::size_t n = grid.n;
  double u = (x - grid.x_lo) / grid.dx;
  if (u <= 0.0) {
    double slope = (row[1] - row[0]) / std::expm1(grid.dx);
    return row[0] + slope * std::expm1(x - grid.x_lo);
  }
  if (u >= static_cast<double>(n - 1)) {
    double slope = (row[n - 1] - row[n - 2]) / -std::expm1(-grid.dx);
    return row[n - 1] + slope * std::expm1(x - grid.x_hi());
  }
  std::size_t k = std::min(static_cast<std::size_t>(u), n - 2);
  double f = u - static_cast<double>(k);
  return (1.0 - f) * row[k] + f * row[k + 1];
}

// ---------------------------------------------------------------------------
// Shift stencils (linear interpolation at x + shift_m)
// ---------------------------------------------------------------------------

/// out[k] = sum_o weights[o - min_offset] * padded[k + o], o in [min_offset, max_offset].
struct ShiftStencil {
  int min_offset = 0;
  std::vector<double> weights;

  int max_offset() const { return min_offset + static_cast<int>(weights.size()) - 1; }
  std::size_t reach() const {
    return static_cast<std::size_t>(std::max(std::abs(min_offset), std::abs(max_offset())));
  }

  /// Applies to a row padded with `ghosts` >= reach() nodes, writing n values.
  void apply(std::span<const double> padded, std::size_t ghosts, std::size_t n, double* out) const {
    const double* base = padded.data() + ghosts + min_offset;
    const std::size_t len = weights.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double* p = base + k;
      double acc = 0.0;
      for (std::size_t o = 0; o < len; ++o) acc += weights[o] * p[o];
      out[k] = acc;
    }
  }
};

/// Stencil for sum_m coef_m * psi(x + shift_m) - subtract * psi(x), with psi
/// linearly interpolated in ln s between nodes. Shifts are in ln-s units.
inline ShiftStencil build_shift_stencil(double dx, std::span<const double> shifts, std::span<const double> coefs,
                                        double subtract = 0.0) {
  int lo = 0;
  int hi = 0;
  for (double sh : shifts) {
    int o = static_cast<int>(std::floor(sh / dx));
    lo = std::min(lo, o);
    hi = std::max(hi, o + 1);
  }
  ShiftStencil st{lo, std::vector<double>(static_cast<std::size_t>(hi - lo + 1), 0.0)};
  for (std::size_t m = 0; m < shifts.size(); ++m) {
    double q = shifts[m] / dx;
    double fl = std::floor(q);
    double f = q - fl;
    int o = static_cast<int>(fl);
    st.weights[static_cast<std::size_t>(o - lo)] += coefs[m] * (1.0 - f);
    st.weights[static_cast<std::size_t>(o + 1 - lo)] += coefs[m] * f;
  }
  st.weights[static_cast<std::size_t>(-lo)] -= subtract;
  return st;
}

// ---------------------------------------------------------------------------
// Gaussian expectation stencils over a monotone cubic Hermite interpolant
// ---------------------------------------------------------------------------

enum class ExpectationRule { exact_cells, gauss_hermite };

/// E[psi(x_k + mean + sd * N)] = sum_o value_w[o] psi[k+o] + slope_w[o] m[k+o],
/// psi the cubic Hermite interpolant with index-unit slopes m.
struct HermiteStencil {
  int min_offset = 0;
  std::vector<double> value_w;
  std::vector<double> slope_w;

  std::size_t reach() const {
    int hi = min_offset + static_cast<int>(value_w.size()) - 1;
    return static_cast<std::size_t>(std::max(std::abs(min_offset), std::abs(hi)));
  }

  void apply(std::span<const double> padded, std::span<const double> slopes, std::size_t ghosts, std::size_t n,
             double* out) const {
    const double* pv = padded.data() + ghosts + min_offset;
    const double* pm = slopes.data() + ghosts + min_offset;
    const std::size_t len = value_w.size();
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t o = 0; o < len; ++o) acc += value_w[o] * pv[k + o] + slope_w[o] * pm[k + o];
      out[k] = acc;
    }
  }
};

namespace detail {

struct HermiteBasis {
  double h00, h10, h01, h11;
};

inline HermiteBasis hermite_basis(double t) {
  double t2 = t * t;
  double t3 = t2 * t;
  return {2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2};
}

}  // namespace detail

/// Builds the stencil for a Gaussian displacement (mean, sd) in ln-s units.
/// `exact_cells` integrates the piecewise cubic exactly against the truncated
/// (+-`width` sd) normal density with Gauss-Legendre per sub-cell;
/// `gauss_hermite` maps the nodes of an order-`order` rule onto the basis.
inline HermiteStencil build_gaussian_stencil(double dx, double mean, double sd, ExpectationRule rule = ExpectationRule::exact_cells,
                                             int order = 64, double width = 10.0) {
  require(dx > 0.0 && sd >= 0.0 && std::isfinite(mean), "invalid Gaussian stencil parameters");
  const double mu = mean / dx;
  const double su = sd / dx;
  if (su == 0.0) {
    int j = static_cast<int>(std::floor(mu));
    double t = mu - j;
    auto b = detail::hermite_basis(t);
    return HermiteStencil{j, {b.h00, b.h01}, {b.h10, b.h11}};
  }
  const double lo_u = mu - width * su;
  const double hi_u = mu + width * su;
  const int j_lo = static_cast<int>(std::floor(lo_u));
  const int j_hi = static_cast<int>(std::floor(hi_u));
  HermiteStencil st{j_lo, std::vector<double>(static_cast<std::size_t>(j_hi - j_lo + 2), 0.0),
                    std::vector<double>(static_cast<std::size_t>(j_hi - j_lo + 2), 0.0)};
  auto add = [&](double u, double w) {
    double fl = std::floor(u);
    int j = static_cast<int>(fl);
    j = std::clamp(j, j_lo, j_hi);
    auto b = detail::hermite_basis(u - j);
    std::size_t idx = static_cast<std::size_t>(j - j_lo);
    st.value_w[idx] += w * b.h00;
    st.slope_w[idx] += w * b.h10;
    st.value_w[idx + 1] += w * b.h01;
    st.slope_w[idx + 1] += w * b.h11;
  };

  if (rule == ExpectationRule::gauss_hermite) {
    const auto& gh = quad::gauss_hermite(order);
    for (std::size_t q = 0; q < gh.nodes.size(); ++q) {
      double u = mu + su * std::numbers::sqrt2 * gh.nodes[q];
      add(u, gh.weights[q] / std::sqrt(std::numbers::pi));
    }
    return st;
  }

  const auto& gl = quad::gauss_legendre(8);
  const int pieces = std::max(1, static_cast<int>(std::ceil(2.0 / su)));
  const double norm = 1.0 / (su * std::sqrt(2.0 * std::numbers::pi));
  double total = 0.0;
  for (int j = j_lo; j <= j_hi; ++j) {
    double a = std::max(static_cast<double>(j), lo_u);
    double b = std::min(static_cast<double>(j + 1), hi_u);
    if (b <= a) continue;
    double h = (b - a) / pieces;
    for (int p = 0; p < pieces; ++p) {
      double c = a + (p + 0.5) * h;
      for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
        double u = c + 0.5 * h * gl.nodes[q];
        double z = (u - mu) / su;
        double w = 0.5 * h * gl.weights[q] * norm * std::exp(-0.5 * z * z);
        total += w;
        auto bs = detail::hermite_basis(u - j);
        std::size_t idx = static_cast<std::size_t>(j - j_lo);
        st.value_w[idx] += w * bs.h00;
        st.slope_w[idx] += w * bs.h10;
        st.value_w[idx + 1] += w * bs.h01;
        st.slope_w[idx + 1] += w * bs.h11;
      }
    }
  }
  // Renormalize the truncated density so constants are preserved exactly.
  for (auto& w : st.value_w) w /= total;
  for (auto& w : st.slope_w) w /= total;
  return st;
}

}  // namespace smjd

// Locally risk-minimizing price by the integral-equation route: beta
// coefficients, log-normal transition kernel, one-step evolution operator U
// (Volterra recursion in the switching time), jump operator B, the mild
// solution recursion phi(t) = U phi + int U (B - R) phi, and the hedge ratio.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/interpolation.hpp"
#include "smjd/market_model.hpp"
#include "smjd/payoff.hpp"
#include "smjd/quadrature.hpp"
#include "smjd/semi_markov.hpp"

namespace smjd {

// ---------------------------------------------------------------------------
// Beta coefficients and the log-normal kernel
// ---------------------------------------------------------------------------

struct BetaCoefficients {
  double beta1 = 0.0;
  std::vector<double> beta2;  ///< one entry per nu-node
};

inline double beta1_value(const MarketModel& model, double t, std::size_t i) {
  const auto& ji = model.jump_integrals();
  double s2 = model.sigma(t, i) * model.sigma(t, i);
  return ((model.mu(i) - model.r(i)) * ji.eta_sq - s2 * ji.eta_mean) / (s2 + ji.eta_sq);
}

/// beta1 = [(mu - r) int eta^2 - sigma^2 int eta] / (sigma^2 + int eta^2),
/// beta2(z) = 1 - (mu - r + int eta) eta(z) / (sigma^2 + int eta^2).
inline BetaCoefficients compute_betas(const MarketModel& model, double t, std::size_t i) {
  const auto& ji = model.jump_integrals();
  const auto& jump = model.jump();
  double s2 = model.sigma(t, i) * model.sigma(t, i);
  double denom = s2 + ji.eta_sq;
  double excess = model.mu(i) - model.r(i) + ji.eta_mean;
  BetaCoefficients out;
  out.beta1 = beta1_value(model, t, i);
  out.beta2.resize(jump.size());
  for (std::size_t m = 0; m < jump.size(); ++m) out.beta2[m] = 1.0 - excess * jump.eta_at(m) / denom;
  return out;
}

struct KernelParams {
  double log_mean = 0.0;
  double log_var = 0.0;
};

/// Log-mean and log-variance of S-hat at t + v started from s at t in regime i
/// (drift r + beta1, volatility sigma, no switching).
inline KernelParams kernel_params(const MarketModel& model, double s, std::size_t i, double t, double v) {
  require(s > 0.0, "kernel needs s > 0");
  if (!(v > 0.0)) throw ValidationError("kernel horizon v must be positive");
  double drift;
  if (model.constant_sigma(i)) {
    double sg = model.sigma(t, i);
    drift = (beta1_value(model, t, i) - 0.5 * sg * sg) * v;
  } else {
    drift = model.integrate(i, t, t + v, [&](double u) {
      double sg = model.sigma(u, i);
      return beta1_value(model, u, i) - 0.5 * sg * sg;
    });
  }
  return KernelParams{std::log(s) + model.r(i) * v + drift, model.integrated_variance(i, t, t + v)};
}

/// E[fn(exp(log_mean + sqrt(log_var) N))] by Gauss-Hermite quadrature.
template <class F>
double lognormal_expect(F&& fn, const KernelParams& p, int order = 64) {
  const auto& gh = quad::gauss_hermite(order);
  const double scale = std::sqrt(2.0 * p.log_var);
  double sum = 0.0;
  for (std::size_t q = 0; q < gh.nodes.size(); ++q) {
    double v = fn(std::exp(p.log_mean + scale * gh.nodes[q]));
    if (!std::isfinite(v)) throw NumericalError("non-finite integrand value in log-normal expectation");
    sum += gh.weights[q] * v;
  }
  return sum / std::sqrt(std::numbers::pi);
}

/// Kink-aware variant for piecewise-smooth fn: the standard-normal line is
/// split at the log-locations of `kinks` and each smooth piece, truncated to
/// +-`width` standard deviations, is integrated by Gauss-Legendre of the given
/// order. Plain Gauss-Hermite loses its spectral accuracy at a kink.
template <class F>
double lognormal_expect(F&& fn, const KernelParams& p, std::span<const double> kinks, int order = 64,
                        double width = 12.0) {
  const double sd = std::sqrt(p.log_var);
  std::vector<double> cuts{-width};
  for (double k : kinks) {
    if (!(k > 0.0)) continue;
    double u = (std::log(k) - p.log_mean) / sd;
    if (u > -width && u < width) cuts.push_back(u);
  }
  cuts.push_back(width);
  std::sort(cuts.begin(), cuts.end());
  const auto& gl = quad::gauss_legendre(order);
  double sum = 0.0;
  for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
    double a = cuts[c], b = cuts[c + 1];
    if (b <= a) continue;
    double half = 0.5 * (b - a), mid = 0.5 * (a + b);
    for (std::size_t q = 0; q < gl.nodes.size(); ++q) {
      double u = mid + half * gl.nodes[q];
      double v = fn(std::exp(p.log_mean + sd * u));
      if (!std::isfinite(v)) throw NumericalError("non-finite integrand value in log-normal expectation");
      sum += half * gl.weights[q] * v * std::exp(-0.5 * u * u);
    }
  }
  return sum / std::sqrt(2.0 * std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Grids and the price surface
// ---------------------------------------------------------------------------

struct GridSpec {
  std::size_t time_steps = 100;  ///< N_t, step Delta = T / N_t (shared by t and y)
  std::size_t s_nodes = 301;     ///< N_s
  double s_ref = 100.0;          ///< reference price placed on a grid node
  double width_sd = 6.0;         ///< half-width of the ln-s range in units of sigma_max sqrt(T)
  double y0 = 0.0;               ///< largest initial age the surface must resolve
  ExpectationRule rule = ExpectationRule::exact_cells;
  int gh_order = 64;
  bool keep_all_layers = true;   ///< false: store only the t = 0 layer

  /// Halves both Delta and the ln-s step.
  GridSpec refined() const {
    GridSpec g = *this;
    g.time_steps *= 2;
    g.s_nodes = 2 * (s_nodes - 1) + 1;
    return g;
  }
};

struct SurfaceGrid {
  LogGrid s;
  double dt = 0.0;
  std::size_t steps = 0;
  std::size_t ages = 1;
  std::size_t regimes = 1;
  double horizon = 0.0;

  double t(std::size_t n) const { return n == steps ? horizon : static_cast<double>(n) * dt; }
  double y(std::size_t k) const { return static_cast<double>(k) * dt; }
  std::size_t layer_size() const { return regimes * ages * s.n; }
  std::size_t row_offset(std::size_t i, std::size_t k) const { return (i * ages + k) * s.n; }
  std::size_t clamp_age(std::size_t k) const { return std::min(k, ages - 1); }
};

inline SurfaceGrid make_surface_grid(const MarketModel& model, const GridSpec& spec) {
  require(spec.time_steps >= 1, "need at least one time step");
  require(spec.s_nodes >= 5, "need at least 5 price nodes");
  require(spec.width_sd > 0.0 && spec.y0 >= 0.0, "invalid grid width or initial age");
  SurfaceGrid g;
  g.horizon = model.horizon();
  g.steps = spec.time_steps;
  g.dt = g.horizon / static_cast<double>(g.steps);
  g.regimes = model.num_regimes();

  const auto& rates = model.rates();
  if (rates.is_markov()) {
    g.ages = 1;
  } else {
    double yc = rates.constant_after_all();
    double reach = std::isfinite(yc) ? yc : g.horizon + spec.y0;
    g.ages = static_cast<std::size_t>(std::ceil(reach / g.dt - 1e-9)) + 1;
  }

  double lo_jump = std::min(0.0, std::log1p(model.jump().min_eta()));
  double hi_jump = std::max(0.0, std::log1p(model.jump().max_eta()));
  double half = spec.width_sd * model.sigma_max() * std::sqrt(g.horizon);
  double xr = std::log(spec.s_ref);
  g.s = make_log_grid(spec.s_ref, xr - half + lo_jump, xr + half + hi_jump, spec.s_nodes);
  return g;
}

struct SolveDiagnostics {
  std::string method;
  double conservativity_error = 0.0;  ///< max |U 1 - 1| (ie) or one-layer |phi - 1| for K = 1, r = 0 (fd)
  double max_growth_ratio = 0.0;      ///< worst per-layer V-norm growth factor
  double growth_envelope = 0.0;       ///< allowed per-layer factor
  double v_norm_terminal = 0.0;
  double v_norm_initial = 0.0;
  double growth_bound = 0.0;          ///< finite V-norm envelope for the whole surface
  bool a2_passed = true;
  std::vector<std::string> warnings;
};

/// phi(t, s, i, y) and xi(t, s, i, y) on the (t, ln s, regime, age) grid.
/// Lookups interpolate linearly in t, ln s and y; ages beyond the grid use the
/// last row; prices beyond the s-range continue linearly in s.
class PriceSurface {
 public:
  PriceSurface() = default;
  PriceSurface(SurfaceGrid grid, std::vector<std::size_t> layer_steps)
      : grid_(std::move(grid)), steps_(std::move(layer_steps)) {
    price_.assign(steps_.size() * grid_.layer_size(), 0.0);
    xi_.assign(steps_.size() * grid_.layer_size(), 0.0);
  }

  const SurfaceGrid& grid() const { return grid_; }
  const std::vector<std::size_t>& layer_steps() const { return steps_; }
  std::size_t num_layers() const { return steps_.size(); }
  SolveDiagnostics& diagnostics() { return diag_; }
  const SolveDiagnostics& diagnostics() const { return diag_; }

  std::span<double> price_layer(std::size_t l) { return {price_.data() + l * grid_.layer_size(), grid_.layer_size()}; }
  std::span<const double> price_layer(std::size_t l) const {
    return {price_.data() + l * grid_.layer_size(), grid_.layer_size()};
  }
  std::span<double> xi_layer(std::size_t l) { return {xi_.data() + l * grid_.layer_size(), grid_.layer_size()}; }
  std::span<const double> xi_layer(std::size_t l) const {
    return {xi_.data() + l * grid_.layer_size(), grid_.layer_size()};
  }

  /// Stored-layer index of time step n, or npos.
  std::size_t layer_of_step(std::size_t n) const {
    for (std::size_t l = 0; l < steps_.size(); ++l)
      if (steps_[l] == n) return l;
    return static_cast<std::size_t>(-1);
  }

  double node_price(std::size_t l, std::size_t i, std::size_t k, std::size_t j) const {
    return price_[l * grid_.layer_size() + grid_.row_offset(i, k) + j];
  }
  double node_xi(std::size_t l, std::size_t i, std::size_t k, std::size_t j) const {
    return xi_[l * grid_.layer_size() + grid_.row_offset(i, k) + j];
  }

  double price_at(double t, double s, std::size_t i, double y) const { return lookup(price_, t, s, i, y, false); }
  /// Hedge ratio lookup; s outside the grid uses the nearest edge node.
  double xi_at(double t, double s, std::size_t i, double y) const { return lookup(xi_, t, s, i, y, true); }

  bool covers(double s) const { return s >= grid_.s.s_min() && s <= grid_.s.s_max(); }

 private:
  double row_value(const std::vector<double>& data, std::size_t l, std::size_t i, std::size_t k, double x,
                   bool clamp) const {
    const double* row = data.data() + l * grid_.layer_size() + grid_.row_offset(i, k);
    std::span<const double> r(row, grid_.s.n);
    if (clamp) x = std::clamp(x, grid_.s.x_lo, grid_.s.x_hi());
    return interp_linear(grid_.s, r, x);
  }

  double layer_value(const std::vector<double>& data, std::size_t l, double x, std::size_t i, double y,
                     bool clamp) const {
    double u = std::max(y, 0.0) / grid_.dt;
    std::size_t k = static_cast<std::size_t>(u);
    if (k + 1 >= grid_.ages) return row_value(data, l, i, grid_.ages - 1, x, clamp);
    double f = u - static_cast<double>(k);
    double a = row_value(data, l, i, k, x, clamp);
    if (f == 0.0) return a;
    return (1.0 - f) * a + f * row_value(data, l, i, k + 1, x, clamp);
  }

  double lookup(const std::vector<double>& data, double t, double s, std::size_t i, double y, bool clamp) const {
    require(i < grid_.regimes, "unknown regime in surface lookup");
    require(s > 0.0, "surface lookup needs s > 0");
    double x = std::log(s);
    if (steps_.size() == 1) return layer_value(data, 0, x, i, y, clamp);
    double u = std::clamp(t, 0.0, grid_.horizon) / grid_.dt;
    // Stored layers are consecutive steps 0..N in this case.
    std::size_t n = std::min(static_cast<std::size_t>(u), grid_.steps - 1);
    double f = std::clamp(u - static_cast<double>(n), 0.0, 1.0);
    double a = layer_value(data, n, x, i, y, clamp);
    if (f == 0.0) return a;
    return (1.0 - f) * a + f * layer_value(data, n + 1, x, i, y, clamp);
  }

  SurfaceGrid grid_;
  std::vector<std::size_t> steps_;
  std::vector<double> price_;
  std::vector<double> xi_;
  SolveDiagnostics diag_;
};

/// V-norm of a layer: sup |psi| / (1 + s).
inline double v_norm(const SurfaceGrid& grid, std::span<const double> layer) {
  double worst = 0.0;
  for (std::size_t i = 0; i < grid.regimes; ++i)
    for (std::size_t k = 0; k < grid.ages; ++k)
      for (std::size_t j = 0; j < grid.s.n; ++j)
        worst = std::max(worst, std::abs(layer[grid.row_offset(i, k) + j]) / (1.0 + grid.s.s(j)));
  return worst;
}

// ---------------------------------------------------------------------------
// Layer operators shared by both solvers: B, (B - R), hedge ratio
// ---------------------------------------------------------------------------

/// Jump-operator and hedge-ratio stencils on a surface grid. Both solvers
/// evaluate psi(s (1 + eta)) through exactly this code.
class JumpStencils {
 public:
  JumpStencils(const MarketModel& model, const SurfaceGrid& grid) : model_(&model), grid_(&grid) {
    const auto& jump = model.jump();
    shifts_.resize(jump.size());
    for (std::size_t m = 0; m < jump.size(); ++m) shifts_[m] = std::log1p(jump.eta_at(m));
    std::vector<double> coef(jump.size());
    double total = 0.0;
    for (std::size_t m = 0; m < jump.size(); ++m) {
      coef[m] = jump.eta_at(m) * jump.weight(m);
      total += coef[m];
    }
    hedge_ = build_shift_stencil(grid.s.dx, shifts_, coef, total);
    reach_ = hedge_.reach();
    for (std::size_t i = 0; i < grid.regimes; ++i)
      if (model.constant_sigma(i)) cached_.push_back(build_b(0.0, i));
      else cached_.emplace_back();
  }

  std::size_t reach() const { return reach_; }

  /// Stencil of B(t) in regime i.
  ShiftStencil b_stencil(double t, std::size_t i) const {
    return model_->constant_sigma(i) ? cached_[i] : build_b(t, i);
  }

  /// Stencil of sum_m (psi(s(1+eta_m)) - psi(s)) eta_m w_m.
  const ShiftStencil& hedge_stencil() const { return hedge_; }

  /// Operator-norm bound sup|beta2| (3 |nu| + int eta dnu) at (t, i).
  double norm_bound(double t, std::size_t i) const {
    auto b = compute_betas(*model_, t, i);
    double sup = 0.0;
    for (double v : b.beta2) sup = std::max(sup, std::abs(v));
    const auto& ji = model_->jump_integrals();
    return sup * (3.0 * ji.mass + ji.eta_mean);
  }

  /// Row operator sum_m beta2_m w_m |.| used by stability rules: sum |coef|.
  double b_weight_sum(double t, std::size_t i) const {
    auto b = compute_betas(*model_, t, i);
    double sum = 0.0;
    for (std::size_t m = 0; m < b.beta2.size(); ++m) sum += std::abs(b.beta2[m]) * model_->jump().weight(m);
    return sum;
  }

 private:
  ShiftStencil build_b(double t, std::size_t i) const {
    auto b = compute_betas(*model_, t, i);
    const auto& jump = model_->jump();
    std::vector<double> coef(jump.size());
    double total = 0.0;
    for (std::size_t m = 0; m < jump.size(); ++m) {
      coef[m] = b.beta2[m] * jump.weight(m);
      total += coef[m];
    }
    auto st = build_shift_stencil(grid_->s.dx, shifts_, coef, total);
    return st;
  }

  const MarketModel* model_;
  const SurfaceGrid* grid_;
  std::vector<double> shifts_;
  ShiftStencil hedge_;
  std::vector<ShiftStencil> cached_;
  std::size_t reach_ = 0;
};

namespace detail {

/// Runs body(i, k, scratch) for every (regime, age row), in parallel over rows.
template <class Body>
void for_each_row(const SurfaceGrid& grid, Body&& body) {
  const std::size_t rows = grid.regimes * grid.ages;
  parallel_for(
      rows,
      [&](std::size_t begin, std::size_t end) {
        std::vector<double> padded;
        std::vector<double> slopes;
        for (std::size_t r = begin; r < end; ++r) body(r / grid.ages, r % grid.ages, padded, slopes);
      },
      std::max<std::size_t>(1, 2048 / std::max<std::size_t>(1, grid.s.n)));
}

}  // namespace detail

/// out = (B(t) - R) in, or B(t) in when `discount` is false.
inline void apply_jump_operator(const MarketModel& model, const SurfaceGrid& grid, const JumpStencils& stencils,
                                double t, std::span<const double> in, std::span<double> out, bool discount) {
  const std::size_t n = grid.s.n;
  detail::for_each_row(grid, [&](std::size_t i, std::size_t k, std::vector<double>& padded, std::vector<double>&) {
    const std::size_t off = grid.row_offset(i, k);
    double* dst = out.data() + off;
    const double* src = in.data() + off;
    const double r = discount ? model.r(i) : 0.0;
    if (model.jump().empty()) {
      for (std::size_t j = 0; j < n; ++j) dst[j] = -r * src[j];
      return;
    }
    ShiftStencil st = stencils.b_stencil(t, i);
    pad_row(grid.s.dx, {src, n}, st.reach() + 1, padded);
    st.apply(padded, st.reach() + 1, n, dst);
    if (r != 0.0)
      for (std::size_t j = 0; j < n; ++j) dst[j] -= r * src[j];
  });
}

/// B(t) applied to a grid function (no discounting).
inline std::vector<double> jump_operator(const MarketModel& model, const SurfaceGrid& grid, double t,
                                         std::span<const double> layer) {
  require(layer.size() == grid.layer_size(), "layer size does not match the grid");
  JumpStencils st(model, grid);
  std::vector<double> out(layer.size());
  apply_jump_operator(model, grid, st, t, layer, out, false);
  return out;
}

/// xi = [sigma^2 dphi/ds + (1/s) sum_m (phi(s(1+eta_m)) - phi(s)) eta_m w_m] / (sigma^2 + int eta^2 dnu),
/// dphi/ds by central differences on the ln-s grid (linear-in-s ghosts at the ends).
inline void hedge_layer(const MarketModel& model, const SurfaceGrid& grid, const JumpStencils& stencils, double t,
                        std::span<const double> phi, std::span<double> xi) {
  const std::size_t n = grid.s.n;
  const double dx = grid.s.dx;
  const double eta_sq = model.jump_integrals().eta_sq;
  detail::for_each_row(grid, [&](std::size_t i, std::size_t k, std::vector<double>& padded, std::vector<double>& jumps) {
    const std::size_t off = grid.row_offset(i, k);
    const double* src = phi.data() + off;
    double* dst = xi.data() + off;
    const std::size_t ghosts = std::max<std::size_t>(stencils.reach(), 1) + 1;
    pad_row(dx, {src, n}, ghosts, padded);
    jumps.assign(n, 0.0);
    if (!model.jump().empty()) stencils.hedge_stencil().apply(padded, ghosts, n, jumps.data());
    const double s2 = model.sigma(t, i) * model.sigma(t, i);
    const double denom = s2 + eta_sq;
    const double span = std::exp(dx) - std::exp(-dx);
    for (std::size_t j = 0; j < n; ++j) {
      double s = grid.s.s(j);
      double dphi = (padded[ghosts + j + 1] - padded[ghosts + j - 1]) / (s * span);
      dst[j] = (s2 * dphi + jumps[j] / s) / denom;
    }
  });
}

/// Hedge ratio at an arbitrary point, evaluated from the stored price surface.
inline double hedge_ratio(const MarketModel& model, const PriceSurface& surface, double t, double s, std::size_t i,
                          double y) {
  const auto& g = surface.grid().s;
  if (!(s >= g.s_min() && s <= g.s_max())) {
    std::ostringstream os;
    os << "s = " << s << " lies outside the surface range [" << g.s_min() << ", " << g.s_max() << "]";
    throw ValidationError(os.str());
  }
  const double h = g.dx;
  double up = surface.price_at(t, s * std::exp(h), i, y);
  double down = surface.price_at(t, s * std::exp(-h), i, y);
  double dphi = (up - down) / (s * (std::exp(h) - std::exp(-h)));
  double here = surface.price_at(t, s, i, y);
  double jumps = 0.0;
  const auto& jump = model.jump();
  for (std::size_t m = 0; m < jump.size(); ++m) {
    double e = jump.eta_at(m);
    jumps += (surface.price_at(t, s * (1.0 + e), i, y) - here) * e * jump.weight(m);
  }
  double s2 = model.sigma(t, i) * model.sigma(t, i);
  return (s2 * dphi + jumps / s) / (s2 + model.jump_integrals().eta_sq);
}

// ---------------------------------------------------------------------------
// One-step evolution operator U(t_{n+1}, t_n)
// ---------------------------------------------------------------------------

/// U(t_{n+1}, t_n) on the surface grid. Over one step of length Delta from
/// (i, y_k): with the conditional survival probability the regime persists and
/// the age moves to y_{k+1}; otherwise the switching time v in (0, Delta] is
/// integrated with product-trapezoid weights against the holding density,
/// using the already-known endpoint values psi(t_{n+1}, j, 0) (v = Delta) and
/// the current-layer values Psi(t_n, j, 0) (v = 0). The age-zero rows are
/// therefore coupled through a small k x k linear system.
class EvolutionOperator {
 public:
  EvolutionOperator(const MarketModel& model, const SurfaceGrid& grid, ExpectationRule rule = ExpectationRule::exact_cells,
                    int gh_order = 64)
      : model_(&model), grid_(&grid), rule_(rule), gh_order_(gh_order) {
    const std::size_t kr = grid.regimes;
    const std::size_t ny = grid.ages;
    const double dt = grid.dt;
    const auto& rates = model.rates();
    surv_.assign(kr * ny, 1.0);
    w0_.assign(kr * ny, 0.0);
    w1_.assign(kr * ny, 0.0);
    p_end_.assign(kr * ny * kr, 0.0);
    p_start_.assign(kr * ny * kr, 0.0);
    for (std::size_t i = 0; i < kr; ++i) {
      if (!rates.has_exits(i)) continue;
      for (std::size_t k = 0; k < ny; ++k) {
        const double y = grid.y(k);
        const double base = rates.cumulative_hazard(i, y);
        auto surv_at = [&](double v) { return std::exp(-(rates.cumulative_hazard(i, y + v) - base)); };
        const double s_end = surv_at(dt);
        const double integral = quad::simpson(surv_at, 0.0, dt, 16);
        const double w1 = (integral - dt * s_end) / dt;
        const std::size_t idx = i * ny + k;
        surv_[idx] = s_end;
        w1_[idx] = w1;
        w0_[idx] = (1.0 - s_end) - w1;
        if (w1 > 0.0) {
          auto p = rates.embedded_probs_limit(i, y + dt);
          std::copy(p.begin(), p.end(), p_end_.begin() + static_cast<std::ptrdiff_t>(idx * kr));
        }
        if (w0_[idx] > 0.0) {
          auto p = rates.embedded_probs_limit(i, y);
          std::copy(p.begin(), p.end(), p_start_.begin() + static_cast<std::ptrdiff_t>(idx * kr));
        }
      }
    }
    // (I - diag(W0(., 0)) P(0)) Psi(., 0) = A(., 0)
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(kr), static_cast<Eigen::Index>(kr));
    for (std::size_t i = 0; i < kr; ++i)
      for (std::size_t j = 0; j < kr; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) -= w0_[i * ny] * p_start_[i * ny * kr + j];
    Eigen::MatrixXd inv = m.inverse();
    if (!inv.allFinite()) throw NumericalError("age-zero coupling system is singular");
    row0_inverse_.resize(kr * kr);
    for (std::size_t i = 0; i < kr; ++i)
      for (std::size_t j = 0; j < kr; ++j)
        row0_inverse_[i * kr + j] = inv(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));

    for (std::size_t i = 0; i < kr; ++i) cached_.push_back(model.constant_sigma(i) ? build_kernel(0, i) : HermiteStencil{});
  }

  double survival(std::size_t i, std::size_t k) const { return surv_[i * grid_->ages + k]; }
  double weight_start(std::size_t i, std::size_t k) const { return w0_[i * grid_->ages + k]; }
  double weight_end(std::size_t i, std::size_t k) const { return w1_[i * grid_->ages + k]; }

  /// Gaussian stencil of the no-switch kernel over [t_n, t_{n+1}] in regime i.
  HermiteStencil kernel_stencil(std::size_t n, std::size_t i) const {
    return model_->constant_sigma(i) ? cached_[i] : build_kernel(n, i);
  }

 private:
  HermiteStencil build_kernel(std::size_t n, std::size_t i) const {
    const double t0 = grid_->t(n);
    const double t1 = grid_->t(n + 1);
    double mean;
    if (model_->constant_sigma(i)) {
      double sg = model_->sigma(0.0, i);
      mean = (model_->r(i) + beta1_value(*model_, 0.0, i) - 0.5 * sg * sg) * (t1 - t0);
    } else {
      mean = model_->r(i) * (t1 - t0) + model_->integrate(i, t0, t1, [&](double u) {
        double sg = model_->sigma(u, i);
        return beta1_value(*model_, u, i) - 0.5 * sg * sg;
      });
    }
    double var = model_->integrated_variance(i, t0, t1);
    return build_gaussian_stencil(grid_->s.dx, mean, std::sqrt(var), rule_, gh_order_);
  }

 public:
  /// out = U(t_{n+1}, t_n) next.
  void apply(std::size_t n, std::span<const double> next, std::span<double> out) const {
    const auto& grid = *grid_;
    const std::size_t kr = grid.regimes;
    const std::size_t ny = grid.ages;
    const std::size_t ns = grid.s.n;
    require(next.size() == grid.layer_size() && out.size() == grid.layer_size(), "layer size mismatch");

    std::vector<HermiteStencil> stencils(kr);
    for (std::size_t i = 0; i < kr; ++i) stencils[i] = kernel_stencil(n, i);

    // E_i[psi(j, 0)] for j != i (the v = Delta endpoint of the switching integral).
    std::vector<double> fresh(kr * kr * ns, 0.0);
    parallel_for(kr * kr, [&](std::size_t begin, std::size_t end) {
      std::vector<double> padded, slopes;
      for (std::size_t c = begin; c < end; ++c) {
        std::size_t i = c / kr, j = c % kr;
        if (i == j || !model_->rates().has_exits(i)) continue;
        expect(stencils[i], next.subspan(grid.row_offset(j, 0), ns), padded, slopes, fresh.data() + c * ns);
      }
    });

    // A(i, k) = surv E_i[psi(i, k+1)] + W1 sum_j p_ij(y_k + Delta) E_i[psi(j, 0)].
    detail::for_each_row(grid, [&](std::size_t i, std::size_t k, std::vector<double>& padded, std::vector<double>& slopes) {
      const std::size_t idx = i * ny + k;
      double* dst = out.data() + grid.row_offset(i, k);
      expect(stencils[i], next.subspan(grid.row_offset(i, grid.clamp_age(k + 1)), ns), padded, slopes, dst);
      const double s = surv_[idx];
      if (s != 1.0)
        for (std::size_t x = 0; x < ns; ++x) dst[x] *= s;
      const double w1 = w1_[idx];
      if (w1 > 0.0) {
        for (std::size_t j = 0; j < kr; ++j) {
          double p = p_end_[idx * kr + j];
          if (p == 0.0) continue;
          const double* f = fresh.data() + (i * kr + j) * ns;
          for (std::size_t x = 0; x < ns; ++x) dst[x] += w1 * p * f[x];
        }
      }
    });

    // Age-zero rows: solve the coupled system node by node.
    if (kr > 1) {
      std::vector<double> rhs(kr);
      for (std::size_t x = 0; x < ns; ++x) {
        for (std::size_t i = 0; i < kr; ++i) rhs[i] = out[grid.row_offset(i, 0) + x];
        for (std::size_t i = 0; i < kr; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < kr; ++j) acc += row0_inverse_[i * kr + j] * rhs[j];
          out[grid.row_offset(i, 0) + x] = acc;
        }
      }
    }
    // Remaining rows: add W0 sum_j p_ij(y_k) Psi(j, 0).
    for (std::size_t i = 0; i < kr; ++i) {
      for (std::size_t k = 1; k < ny; ++k) {
        const std::size_t idx = i * ny + k;
        const double w0 = w0_[idx];
        if (w0 <= 0.0) continue;
        double* dst = out.data() + grid.row_offset(i, k);
        for (std::size_t j = 0; j < kr; ++j) {
          double p = p_start_[idx * kr + j];
          if (p == 0.0) continue;
          const double* src = out.data() + grid.row_offset(j, 0);
          for (std::size_t x = 0; x < ns; ++x) dst[x] += w0 * p * src[x];
        }
      }
    }
  }

  /// max |U 1 - 1| over the layer for step n.
  double conservativity_error(std::size_t n) const {
    std::vector<double> ones(grid_->layer_size(), 1.0);
    std::vector<double> out(ones.size());
    apply(n, ones, out);
    double worst = 0.0;
    for (double v : out) worst = std::max(worst, std::abs(v - 1.0));
    return worst;
  }

 private:
  void expect(const HermiteStencil& st, std::span<const double> row, std::vector<double>& padded,
              std::vector<double>& slopes, double* dst) const {
    const std::size_t ghosts = st.reach() + 2;
    pad_row(grid_->s.dx, row, ghosts, padded);
    monotone_slopes(padded, slopes);
    st.apply(padded, slopes, ghosts, row.size(), dst);
  }

  const MarketModel* model_;
  const SurfaceGrid* grid_;
  ExpectationRule rule_;
  int gh_order_;
  std::vector<double> surv_, w0_, w1_;
  std::vector<double> p_end_, p_start_;
  std::vector<double> row0_inverse_;
  std::vector<HermiteStencil> cached_;
};

/// Grid function psi(s, i, y) sampled on every node.
inline std::vector<double> sample_layer(const SurfaceGrid& grid,
                                        const std::function<double(double, std::size_t, double)>& fn) {
  std::vector<double> layer(grid.layer_size());
  for (std::size_t i = 0; i < grid.regimes; ++i)
    for (std::size_t k = 0; k < grid.ages; ++k)
      for (std::size_t j = 0; j < grid.s.n; ++j) layer[grid.row_offset(i, k) + j] = fn(grid.s.s(j), i, grid.y(k));
  return layer;
}

/// Psi(u, t_n) = U(u, t_n) psi for every t_n <= u, by chaining one-step
/// operators backwards from u. Layers above u hold psi itself.
inline PriceSurface evolution_apply(const MarketModel& model, const std::function<double(double, std::size_t, double)>& terminal,
                                    double u, const GridSpec& spec) {
  SurfaceGrid grid = make_surface_grid(model, spec);
  double steps_f = u / grid.dt;
  std::size_t nu = static_cast<std::size_t>(std::lround(steps_f));
  require(u >= 0.0 && std::abs(steps_f - static_cast<double>(nu)) < 1e-9 && nu <= grid.steps, "u must lie on the t-grid");
  std::vector<std::size_t> layers(grid.steps + 1);
  for (std::size_t n = 0; n <= grid.steps; ++n) layers[n] = n;
  PriceSurface surface(grid, layers);
  EvolutionOperator op(model, surface.grid(), spec.rule, spec.gh_order);
  auto psi = sample_layer(surface.grid(), terminal);
  for (std::size_t n = nu; n <= grid.steps; ++n) std::copy(psi.begin(), psi.end(), surface.price_layer(n).begin());
  for (std::size_t n = nu; n-- > 0;) op.apply(n, surface.price_layer(n + 1), surface.price_layer(n));
  surface.diagnostics().method = "evolution";
  surface.diagnostics().conservativity_error = op.conservativity_error(0);
  return surface;
}

// ---------------------------------------------------------------------------
// Price by the mild-solution recursion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::size_t> stored_steps(const SurfaceGrid& grid, bool keep_all) {
  if (!keep_all) return {0};
  std::vector<std::size_t> steps(grid.steps + 1);
  for (std::size_t n = 0; n <= grid.steps; ++n) steps[n] = n;
  return steps;
}

/// sup over regimes, t-extremes and nodes of r + beta1, and the per-layer
/// growth envelope constant c = sup r + sup |r + beta1| + sup lambda + sup ||B||.
struct GrowthConstants {
  double sup_r_beta1 = 0.0;
  double sup_r = 0.0;
  double sup_lambda = 0.0;
  double sup_b = 0.0;
  double envelope_rate() const { return sup_r + std::abs(sup_r_beta1) + sup_lambda + sup_b; }
};

inline GrowthConstants growth_constants(const MarketModel& model, const SurfaceGrid& grid, const JumpStencils& st) {
  GrowthConstants g;
  g.sup_r_beta1 = -kInf;
  for (std::size_t i = 0; i < grid.regimes; ++i) {
    g.sup_r = std::max(g.sup_r, std::abs(model.r(i)));
    for (double t : model.extreme_times(i)) {
      g.sup_r_beta1 = std::max(g.sup_r_beta1, std::abs(model.r(i) + beta1_value(model, t, i)));
      g.sup_b = std::max(g.sup_b, 2.0 * st.b_weight_sum(t, i));
    }
    for (std::size_t k = 0; k < grid.ages; ++k) {
      for (int sub = 0; sub <= 4; ++sub)
        g.sup_lambda = std::max(g.sup_lambda, model.rates().total_rate(i, grid.y(k) + 0.25 * sub * grid.dt));
    }
  }
  return g;
}

inline double payoff_v_norm(const PayoffSpec& payoff, const SurfaceGrid& grid) {
  double worst = 0.0;
  for (std::size_t j = 0; j < grid.s.n; ++j) worst = std::max(worst, std::abs(payoff(grid.s.s(j))) / (1.0 + grid.s.s(j)));
  return worst;
}

inline void fill_terminal(const PayoffSpec& payoff, const SurfaceGrid& grid, std::span<double> layer) {
  std::vector<double> row(grid.s.n);
  for (std::size_t j = 0; j < grid.s.n; ++j) row[j] = payoff(grid.s.s(j));
  for (std::size_t i = 0; i < grid.regimes; ++i)
    for (std::size_t k = 0; k < grid.ages; ++k) std::copy(row.begin(), row.end(), layer.begin() + grid.row_offset(i, k));
}

inline void check_a2(const MarketModel& model, SolveDiagnostics& diag) {
  auto times = uniform_times(model.horizon(), 101);
  for (std::size_t i = 0; i < model.num_regimes(); ++i)
    for (double b : model.breakpoints(i)) times.push_back(std::clamp(b, 0.0, model.horizon()));
  auto rep = check_no_arbitrage(model, times);
  diag.a2_passed = rep.passed;
  if (!rep.passed) {
    std::ostringstream os;
    os << "no-arbitrage condition fails (worst J*eta = " << rep.worst_value << " at t = " << rep.witness_t
       << ", regime " << rep.witness_regime + 1 << ", z = " << rep.witness_z << ")";
    diag.warnings.push_back(os.str());
  }
}

}  // namespace detail

/// phi(t_n) = U phi(t_{n+1}) + int_{t_n}^{t_{n+1}} U(u, t_n)(B(u) - R) phi(u) du,
/// the integral by the trapezoid rule with an explicit predictor for phi(t_n)
/// (second order in Delta). Terminal layer phi(T) = K.
inline PriceSurface solve_price(const MarketModel& model, const PayoffSpec& payoff, const GridSpec& spec) {
  payoff.validate();
  SurfaceGrid grid = make_surface_grid(model, spec);
  PriceSurface surface(grid, detail::stored_steps(grid, spec.keep_all_layers));
  const SurfaceGrid& g = surface.grid();
  auto& diag = surface.diagnostics();
  diag.method = "ie";
  detail::check_a2(model, diag);

  EvolutionOperator op(model, g, spec.rule, spec.gh_order);
  JumpStencils jumps(model, g);
  diag.conservativity_error = op.conservativity_error(g.steps - 1);
  if (diag.conservativity_error > 1e-6) {
    std::ostringstream os;
    os << "grid too coarse: one-step conservativity error " << diag.conservativity_error << " exceeds 1e-6";
    throw NumericalError(os.str());
  }
  auto gc = detail::growth_constants(model, g, jumps);
  const double knorm = detail::payoff_v_norm(payoff, g);
  double sup_rb = -kInf;
  for (std::size_t i = 0; i < g.regimes; ++i)
    for (double t : model.extreme_times(i)) sup_rb = std::max(sup_rb, model.r(i) + beta1_value(model, t, i));
  diag.growth_bound = knorm * (1.0 + std::exp(g.horizon * sup_rb)) * std::exp(gc.envelope_rate() * g.horizon);
  diag.growth_envelope = std::exp(gc.envelope_rate() * g.dt);

  const std::size_t size = g.layer_size();
  std::vector<double> phi(size), next(size), work(size), u_phi(size), u_work(size), pred(size);
  detail::fill_terminal(payoff, g, next);
  diag.v_norm_terminal = v_norm(g, next);

  auto store = [&](std::size_t n, const std::vector<double>& layer) {
    std::size_t l = surface.layer_of_step(n);
    if (l == static_cast<std::size_t>(-1)) return;
    std::copy(layer.begin(), layer.end(), surface.price_layer(l).begin());
    hedge_layer(model, g, jumps, g.t(n), layer, surface.xi_layer(l));
  };
  store(g.steps, next);

  const double dt = g.dt;
  double prev_norm = diag.v_norm_terminal;
  for (std::size_t n = g.steps; n-- > 0;) {
    const double t0 = g.t(n);
    const double t1 = g.t(n + 1);
    apply_jump_operator(model, g, jumps, t1, next, work, true);
    op.apply(n, next, u_phi);
    op.apply(n, work, u_work);
    for (std::size_t q = 0; q < size; ++q) pred[q] = u_phi[q] + dt * u_work[q];
    apply_jump_operator(model, g, jumps, t0, pred, work, true);
    for (std::size_t q = 0; q < size; ++q) phi[q] = u_phi[q] + 0.5 * dt * (u_work[q] + work[q]);
    for (double v : phi)
      if (!std::isfinite(v)) throw NumericalError("non-finite price in the integral-equation recursion");
    double norm = v_norm(g, phi);
    if (prev_norm > 0.0) diag.max_growth_ratio = std::max(diag.max_growth_ratio, norm / prev_norm);
    prev_norm = norm;
    store(n, phi);
    std::swap(phi, next);
  }
  diag.v_norm_initial = prev_norm;
  return surface;
}

/// sup |dphi/ds| over every stored layer (central differences at interior nodes).
inline double max_price_slope(const PriceSurface& surface) {
  const auto& g = surface.grid();
  double worst = 0.0;
  for (std::size_t l = 0; l < surface.num_layers(); ++l)
    for (std::size_t i = 0; i < g.regimes; ++i)
      for (std::size_t k = 0; k < g.ages; ++k)
        for (std::size_t j = 1; j + 1 < g.s.n; ++j) {
          double d = (surface.node_price(l, i, k, j + 1) - surface.node_price(l, i, k, j - 1)) /
                     (g.s.s(j + 1) - g.s.s(j - 1));
          worst = std::max(worst, std::abs(d));
        }
  return worst;
}

/// sup |xi| over every stored node.
inline double max_abs_xi(const PriceSurface& surface) {
  double worst = 0.0;
  for (std::size_t l = 0; l < surface.num_layers(); ++l)
    for (double v : surface.xi_layer(l)) worst = std::max(worst, std::abs(v));
  return worst;
}

}  // namespace smjd

// Finite-difference solver for the pricing integro-differential equation:
// IMEX backward Euler along the (t, y) characteristics, implicit diffusion and
// advection in ln s (one tridiagonal solve per regime and age row), explicit
// regime coupling and jump operator, discounting by the exact factor e^{-r Delta}.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/interpolation.hpp"
#include "smjd/market_model.hpp"
#include "smjd/payoff.hpp"
#include "smjd/pricing_kernel.hpp"

namespace smjd {

/// The FD grid is the surface grid: t and y share the step Delta exactly.
using FdGrid = GridSpec;

namespace detail {

/// Solves a tridiagonal system in place (Thomas algorithm); `rhs` becomes the solution.
inline void solve_tridiagonal(std::span<const double> lower, std::span<const double> diag,
                              std::span<const double> upper, std::span<double> rhs, std::vector<double>& scratch) {
  const std::size_t n = diag.size();
  scratch.resize(n);
  double denom = diag[0];
  if (denom == 0.0) throw NumericalError("singular tridiagonal system");
  scratch[0] = upper[0] / denom;
  rhs[0] /= denom;
  for (std::size_t j = 1; j < n; ++j) {
    denom = diag[j] - lower[j] * scratch[j - 1];
    if (denom == 0.0) throw NumericalError("singular tridiagonal system");
    scratch[j] = j + 1 < n ? upper[j] / denom : 0.0;
    rhs[j] = (rhs[j] - lower[j] * rhs[j - 1]) / denom;
  }
  for (std::size_t j = n - 1; j-- > 0;) rhs[j] -= scratch[j] * rhs[j + 1];
}

}  // namespace detail

/// One backward IMEX step of the FD scheme.
class FdStepper {
 public:
  FdStepper(const MarketModel& model, const SurfaceGrid& grid)
      : model_(&model), grid_(&grid), jumps_(model, grid) {}

  const JumpStencils& jump_stencils() const { return jumps_; }

  /// out = layer at t_n from `next` at t_{n+1}. Discounting enters as the
  /// exact factor e^{-r_i Delta} after the implicit solve; with `discount`
  /// false it is dropped (conservativity diagnostics).
  void step(std::size_t n, std::span<const double> next, std::span<double> out, bool discount) const {
    const auto& g = *grid_;
    const std::size_t ns = g.s.n;
    const double dt = g.dt;
    const double t0 = g.t(n);
    const double t1 = g.t(n + 1);
    std::vector<double> explicit_part(g.layer_size());
    apply_jump_operator(*model_, g, jumps_, t1, next, explicit_part, false);

    detail::for_each_row(g, [&](std::size_t i, std::size_t k, std::vector<double>& scratch, std::vector<double>&) {
      const std::size_t foot = g.row_offset(i, g.clamp_age(k + 1));
      const double age = g.y(k) + dt;
      const double* psi = next.data() + foot;
      const double* ex = explicit_part.data() + foot;
      double* dst = out.data() + g.row_offset(i, k);
      for (std::size_t x = 0; x < ns; ++x) dst[x] = psi[x] + dt * ex[x];
      for (std::size_t j = 0; j < g.regimes; ++j) {
        if (j == i) continue;
        double lam = model_->rates().rate(i, j, age);
        if (lam == 0.0) continue;
        const double* fresh = next.data() + g.row_offset(j, 0);
        for (std::size_t x = 0; x < ns; ++x) dst[x] += dt * lam * (fresh[x] - psi[x]);
      }
      implicit_solve(t0, i, {dst, ns}, scratch);
      if (discount) {
        const double factor = std::exp(-model_->r(i) * dt);
        for (std::size_t x = 0; x < ns; ++x) dst[x] *= factor;
      }
    });
  }

 private:
  // (I - Delta L) phi = rhs, L = 1/2 sigma^2 d_xx + (r + beta1 - 1/2 sigma^2) d_x,
  // with linear-in-s ghost nodes eliminated at both ends.
  void implicit_solve(double t, std::size_t i, std::span<double> rhs, std::vector<double>& scratch) const {
    const auto& g = *grid_;
    const std::size_t ns = g.s.n;
    const double dx = g.s.dx;
    const double dt = g.dt;
    const double sg = model_->sigma(t, i);
    const double drift = model_->r(i) + beta1_value(*model_, t, i) - 0.5 * sg * sg;
    const double a = 0.5 * sg * sg / (dx * dx) - 0.5 * drift / dx;  // phi_{j-1}
    const double b = -sg * sg / (dx * dx);                           // phi_j
    const double c = 0.5 * sg * sg / (dx * dx) + 0.5 * drift / dx;   // phi_{j+1}
    thread_local std::vector<double> lower, diag, upper;
    lower.assign(ns, -dt * a);
    diag.assign(ns, 1.0 - dt * b);
    upper.assign(ns, -dt * c);
    // phi_{-1} = (1 + e^{-dx}) phi_0 - e^{-dx} phi_1
    const double em = std::exp(-dx);
    diag[0] = 1.0 - dt * (b + a * (1.0 + em));
    upper[0] = -dt * (c - a * em);
    lower[0] = 0.0;
    // phi_N = (1 + e^{dx}) phi_{N-1} - e^{dx} phi_{N-2}
    const double ep = std::exp(dx);
    diag[ns - 1] = 1.0 - dt * (b + c * (1.0 + ep));
    lower[ns - 1] = -dt * (a - c * ep);
    upper[ns - 1] = 0.0;
    detail::solve_tridiagonal(lower, diag, upper, rhs, scratch);
  }

  const MarketModel* model_;
  const SurfaceGrid* grid_;
  JumpStencils jumps_;
};

/// Price surface by the FD route. Enforces Delta (sup lambda + sup ||B|| + sup r) < 0.5
/// at setup and the per-layer V-norm growth envelope during the sweep.
inline PriceSurface solve_price_fd(const MarketModel& model, const PayoffSpec& payoff, const FdGrid& spec) {
  payoff.validate();
  SurfaceGrid grid = make_surface_grid(model, spec);
  PriceSurface surface(grid, detail::stored_steps(grid, spec.keep_all_layers));
  const SurfaceGrid& g = surface.grid();
  auto& diag = surface.diagnostics();
  diag.method = "fd";
  detail::check_a2(model, diag);

  FdStepper stepper(model, g);
  const auto gc = detail::growth_constants(model, g, stepper.jump_stencils());
  const double rule = g.dt * (gc.sup_lambda + gc.sup_b + gc.sup_r);
  if (!(rule < 0.5)) {
    std::ostringstream os;
    os << "explicit-part stability rule violated: Delta (sup lambda + sup ||B|| + sup r) = " << rule << " >= 0.5";
    throw NumericalError(os.str());
  }
  {
    std::vector<double> ones(g.layer_size(), 1.0), out(g.layer_size());
    stepper.step(g.steps - 1, ones, out, false);
    for (double v : out) diag.conservativity_error = std::max(diag.conservativity_error, std::abs(v - 1.0));
  }
  diag.growth_envelope = std::exp(gc.envelope_rate() * g.dt);
  const double knorm = detail::payoff_v_norm(payoff, g);
  double sup_rb = -kInf;
  for (std::size_t i = 0; i < g.regimes; ++i)
    for (double t : model.extreme_times(i)) sup_rb = std::max(sup_rb, model.r(i) + beta1_value(model, t, i));
  diag.growth_bound = knorm * (1.0 + std::exp(g.horizon * sup_rb)) * std::exp(gc.envelope_rate() * g.horizon);

  std::vector<double> next(g.layer_size()), phi(g.layer_size());
  detail::fill_terminal(payoff, g, next);
  diag.v_norm_terminal = v_norm(g, next);
  auto store = [&](std::size_t n, const std::vector<double>& layer) {
    std::size_t l = surface.layer_of_step(n);
    if (l == static_cast<std::size_t>(-1)) return;
    std::copy(layer.begin(), layer.end(), surface.price_layer(l).begin());
    hedge_layer(model, g, stepper.jump_stencils(), g.t(n), layer, surface.xi_layer(l));
  };
  store(g.steps, next);

  double prev_norm = diag.v_norm_terminal;
  for (std::size_t n = g.steps; n-- > 0;) {
    stepper.step(n, next, phi, true);
    double norm = v_norm(g, phi);
    if (!std::isfinite(norm)) throw NumericalError("non-finite price in the finite-difference sweep");
    if (prev_norm > 0.0) {
      double ratio = norm / prev_norm;
      diag.max_growth_ratio = std::max(diag.max_growth_ratio, ratio);
      if (ratio > diag.growth_envelope * (1.0 + 1e-9)) {
        std::ostringstream os;
        os << "layer growth " << ratio << " exceeds the stability envelope " << diag.growth_envelope << " at t = "
           << g.t(n);
        throw NumericalError(os.str());
      }
    }
    prev_norm = norm;
    store(n, phi);
    std::swap(phi, next);
  }
  diag.v_norm_initial = prev_norm;
  return surface;
}

}  // namespace smjd

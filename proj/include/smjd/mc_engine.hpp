// Monte Carlo under the minimal martingale measure (direct Q simulation by
// thinning, and P simulation weighted by the density Z_T) and hedging
// backtests of the locally risk-minimizing strategy along P-paths.
#pragma once

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/market_model.hpp"
#include "smjd/payoff.hpp"
#include "smjd/pricing_kernel.hpp"
#include "smjd/semi_markov.hpp"

namespace smjd {

struct McEstimate {
  double value = kNaN;
  double std_error = kNaN;
  double ci_low = kNaN;
  double ci_high = kNaN;
  double level = 0.99;
  std::size_t n_paths = 0;
  std::uint64_t seed = 0;

  bool contains(double x) const { return x >= ci_low && x <= ci_high; }
};

/// Two-sided normal quantile for a confidence level, e.g. 0.99 -> 2.5758.
inline double normal_quantile_two_sided(double level) {
  require(level > 0.0 && level < 1.0, "confidence level must lie in (0, 1)");
  boost::math::normal_distribution<double> nd;
  return boost::math::quantile(nd, 0.5 + 0.5 * level);
}

/// Mean, standard error and normal CI of per-path values (fixed-order sums).
inline McEstimate summarize(std::span<const double> values, std::uint64_t seed, double level = 0.99) {
  McEstimate est;
  est.n_paths = values.size();
  est.seed = seed;
  est.level = level;
  if (values.empty()) return est;
  const double n = static_cast<double>(values.size());
  est.value = pairwise_sum(values) / n;
  std::vector<double> dev(values.size());
  for (std::size_t p = 0; p < values.size(); ++p) dev[p] = (values[p] - est.value) * (values[p] - est.value);
  double var = values.size() > 1 ? pairwise_sum(dev) / (n - 1.0) : 0.0;
  est.std_error = std::sqrt(var / n);
  double z = normal_quantile_two_sided(level);
  est.ci_low = est.value - z * est.std_error;
  est.ci_high = est.value + z * est.std_error;
  return est;
}

struct McOptions {
  double s0 = 100.0;
  std::size_t x0 = 0;
  double y0 = 0.0;
  double level = 0.99;
};

namespace detail {

inline void require_a2(const MarketModel& model) {
  auto times = uniform_times(model.horizon(), 101);
  for (std::size_t i = 0; i < model.num_regimes(); ++i)
    for (double b : model.breakpoints(i)) times.push_back(std::clamp(b, 0.0, model.horizon()));
  auto rep = check_no_arbitrage(model, times);
  if (!rep.passed) {
    std::ostringstream os;
    os << "no-arbitrage condition violated (J*eta = " << rep.worst_value << " at z = " << rep.witness_z
       << ", regime " << rep.witness_regime + 1 << ")";
    throw ValidationError(os.str());
  }
}

/// Runs value(p, rng) for every path with its own derived stream.
template <class F>
std::vector<double> per_path(std::size_t n_paths, std::uint64_t seed, F&& value) {
  std::vector<double> out(n_paths);
  parallel_for(
      n_paths,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
          RandomStream rng = RandomStream::derived(seed, p);
          out[p] = value(p, rng);
        }
      },
      256);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Simulation under Q
// ---------------------------------------------------------------------------

struct ThinningStats {
  std::size_t proposals = 0;
  std::size_t accepted = 0;
  double min_ratio = kInf;
  double max_ratio = 0.0;
};

struct TerminalState {
  double s = 0.0;
  double log_bank = 0.0;
  std::size_t regime = 0;
  double age = 0.0;
};

/// sup over nu-nodes and sigma extremes of Gamma(t, z, i).
inline double sup_gamma(const MarketModel& model, std::size_t i) {
  double sup = 0.0;
  const auto& jump = model.jump();
  for (double t : model.extreme_times(i)) {
    double j = model.mmm_ratio(t, i);
    sup = std::max({sup, 1.0 + j * jump.min_eta(), 1.0 + j * jump.max_eta()});
  }
  return sup;
}

/// One path of (S, X, Y) under Q up to T: Brownian drift shifted by J sigma,
/// jump epochs by thinning a Poisson process of rate |nu| sup Gamma.
inline TerminalState simulate_terminal_q(const MarketModel& model, double s0, std::size_t x0, double y0,
                                         RandomStream& rng, ThinningStats* stats = nullptr) {
  const auto& jump = model.jump();
  const double horizon = model.horizon();
  double t = 0.0;
  std::size_t x = x0;
  double regime_start = -y0;
  double log_s = std::log(s0);
  double log_bank = 0.0;

  auto advance = [&](double t1) {
    if (t1 <= t) return;
    SegmentMoments m = model.segment_moments(x, t, t1);
    log_s += model.mu(x) * (t1 - t) + m.covariance - 0.5 * m.variance + std::sqrt(m.variance) * rng.normal();
    log_bank += model.r(x) * (t1 - t);
    t = t1;
  };

  Transition tr = sample_transition(model.rates(), x, y0, rng);
  double next_regime = tr.holding;
  while (true) {
    const double bound = sup_gamma(model, x);
    const double rate = jump.mass() * bound;
    double proposal = rate > 0.0 ? t + rng.exponential() / rate : kInf;
    while (proposal < std::min(next_regime, horizon)) {
      advance(proposal);
      std::size_t node = jump.sample_node(rng.uniform());
      double gamma = 1.0 + model.mmm_ratio(t, x) * jump.eta_at(node);
      double ratio = gamma / bound;
      if (!(ratio > 0.0) || ratio > 1.0 + 1e-12) throw NumericalError("thinning acceptance ratio outside (0, 1]");
      bool accept = rng.uniform() <= ratio;
      if (stats) {
        ++stats->proposals;
        stats->min_ratio = std::min(stats->min_ratio, ratio);
        stats->max_ratio = std::max(stats->max_ratio, ratio);
        if (accept) ++stats->accepted;
      }
      if (accept) log_s += std::log1p(jump.eta_at(node));
      proposal = t + rng.exponential() / rate;
    }
    if (next_regime < horizon) {
      advance(next_regime);
      x = tr.next;
      regime_start = t;
      tr = sample_transition(model.rates(), x, 0.0, rng);
      next_regime = t + tr.holding;
    } else {
      advance(horizon);
      break;
    }
  }
  if (!std::isfinite(log_s)) throw NumericalError("simulated price is not finite");
  return TerminalState{std::exp(log_s), log_bank, x, horizon - regime_start};
}

/// E_Q[e^{-int r} K(S_T)] by direct simulation under Q.
inline McEstimate price_mc_q(const MarketModel& model, const PayoffSpec& payoff, std::size_t n_paths,
                             std::uint64_t seed, const McOptions& opts = {}, ThinningStats* stats = nullptr) {
  require(n_paths >= 2, "need at least two paths");
  payoff.validate();
  detail::require_a2(model);
  std::vector<ThinningStats> chunk_stats(n_paths);
  auto values = detail::per_path(n_paths, seed, [&](std::size_t p, RandomStream& rng) {
    auto end = simulate_terminal_q(model, opts.s0, opts.x0, opts.y0, rng, stats ? &chunk_stats[p] : nullptr);
    return std::exp(-end.log_bank) * payoff(end.s);
  });
  if (stats) {
    for (const auto& c : chunk_stats) {
      stats->proposals += c.proposals;
      stats->accepted += c.accepted;
      stats->min_ratio = std::min(stats->min_ratio, c.min_ratio);
      stats->max_ratio = std::max(stats->max_ratio, c.max_ratio);
    }
  }
  return summarize(values, seed, opts.level);
}

// ---------------------------------------------------------------------------
// Simulation under P with density weights
// ---------------------------------------------------------------------------

/// E_P[Z_T e^{-int r} K(S_T)].
inline McEstimate price_mc_p_weighted(const MarketModel& model, const PayoffSpec& payoff, std::size_t n_paths,
                                      std::uint64_t seed, const McOptions& opts = {}) {
  require(n_paths >= 2, "need at least two paths");
  payoff.validate();
  detail::require_a2(model);
  const double grid[] = {model.horizon()};
  auto values = detail::per_path(n_paths, seed, [&](std::size_t, RandomStream& rng) {
    auto path = simulate_asset_path(model, opts.s0, opts.x0, opts.y0, rng, grid);
    double z = radon_nikodym_path(model, path);
    const auto& end = path.terminal();
    return z * std::exp(-end.log_bank) * payoff(end.s);
  });
  return summarize(values, seed, opts.level);
}

struct MeasureChangeCheck {
  McEstimate mean_z;             ///< E_P[Z_T], should be 1
  McEstimate discounted_price;   ///< E_P[Z_T e^{-int r} S_T], should be S_0
};

/// Martingale checks of the density process on a common set of P-paths.
inline MeasureChangeCheck measure_change_check(const MarketModel& model, std::size_t n_paths, std::uint64_t seed,
                                               const McOptions& opts = {}) {
  require(n_paths >= 2, "need at least two paths");
  detail::require_a2(model);
  const double grid[] = {model.horizon()};
  std::vector<double> z_values(n_paths), s_values(n_paths);
  parallel_for(
      n_paths,
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
          RandomStream rng = RandomStream::derived(seed, p);
          auto path = simulate_asset_path(model, opts.s0, opts.x0, opts.y0, rng, grid);
          double z = radon_nikodym_path(model, path);
          z_values[p] = z;
          s_values[p] = z * std::exp(-path.terminal().log_bank) * path.terminal().s;
        }
      },
      256);
  return {summarize(z_values, seed, opts.level), summarize(s_values, seed, opts.level)};
}

// ---------------------------------------------------------------------------
// Hedging backtest
// ---------------------------------------------------------------------------

struct BacktestOptions {
  std::size_t n_paths = 10000;
  std::size_t rebalance_steps = 250;
  std::uint64_t seed = 1;
  double s0 = 100.0;
  std::size_t x0 = 0;
  double y0 = 0.0;
};

struct BacktestReport {
  std::size_t n_paths = 0;
  std::size_t rebalance_steps = 0;
  std::uint64_t seed = 0;
  double initial_value = 0.0;        ///< phi(0, s0, x0, y0)
  double mean_residual = 0.0;        ///< mean of L_T
  double residual_std_error = 0.0;
  double residual_variance = 0.0;    ///< Var(L_T)
  double unhedged_variance = 0.0;    ///< Var(e^{-int r} K(S_T))
  double std_ratio = 0.0;            ///< sqrt(residual / unhedged variance)
  double correlation = 0.0;          ///< pooled per-step corr(dL, dM)
  double correlation_std_error = 0.0;
  std::size_t coverage_misses = 0;   ///< lookups outside the surface s-range
  std::vector<std::string> warnings;
};

/// Holds xi(t_k, S, X, Y) units of discounted stock over [t_k, t_{k+1}] along
/// P-paths; dL = d(phi / B) - xi dS*, dM = dS* minus its P-compensator.
inline BacktestReport backtest_hedge(const MarketModel& model, const PriceSurface& surface, const PayoffSpec& payoff,
                                     const BacktestOptions& opts) {
  require(opts.n_paths >= 2 && opts.rebalance_steps >= 1, "backtest needs >= 2 paths and >= 1 rebalance");
  require(surface.num_layers() == surface.grid().steps + 1, "backtest needs a surface with every time layer");
  payoff.validate();
  const std::size_t n_steps = opts.rebalance_steps;
  const double horizon = model.horizon();
  const double dt = horizon / static_cast<double>(n_steps);
  std::vector<double> grid(n_steps);
  for (std::size_t k = 0; k < n_steps; ++k)
    grid[k] = k + 1 == n_steps ? horizon : horizon * static_cast<double>(k + 1) / static_cast<double>(n_steps);
  const double eta_mean = model.jump_integrals().eta_mean;

  const std::size_t n = opts.n_paths;
  std::vector<double> l_total(n), unhedged(n), cross(n), l_sq(n), m_sq(n);
  std::vector<std::size_t> misses(n, 0);
  parallel_for(
      n,
      [&](std::size_t begin, std::size_t end) {
        std::vector<double> ts(n_steps + 1), ss(n_steps + 1), ys(n_steps + 1), bank(n_steps + 1);
        std::vector<std::size_t> xs(n_steps + 1);
        for (std::size_t p = begin; p < end; ++p) {
          RandomStream rng = RandomStream::derived(opts.seed, p);
          auto path = simulate_asset_path(model, opts.s0, opts.x0, opts.y0, rng, grid);
          std::size_t k = 0;
          for (const auto& pt : path.points) {
            if (pt.event != PathEvent::grid) continue;
            ts[k] = pt.t;
            ss[k] = pt.s;
            xs[k] = pt.regime;
            ys[k] = pt.age;
            bank[k] = pt.log_bank;
            ++k;
          }
          double lsum = 0.0, c = 0.0, a = 0.0, b = 0.0;
          double v_prev = 0.0;
          for (std::size_t q = 0; q < n_steps; ++q) {
            const double s_star = ss[q] * std::exp(-bank[q]);
            const double s_star_next = ss[q + 1] * std::exp(-bank[q + 1]);
            if (!surface.covers(ss[q])) ++misses[p];
            if (q == 0) v_prev = surface.price_at(ts[0], ss[0], xs[0], ys[0]) * std::exp(-bank[0]);
            double v_next = q + 1 == n_steps ? payoff(ss[q + 1]) * std::exp(-bank[q + 1])
                                             : surface.price_at(ts[q + 1], ss[q + 1], xs[q + 1], ys[q + 1]) *
                                                   std::exp(-bank[q + 1]);
            double xi = surface.xi_at(ts[q], ss[q], xs[q], ys[q]);
            double ds = s_star_next - s_star;
            double dl = v_next - v_prev - xi * ds;
            double drift = model.mu(xs[q]) - model.r(xs[q]) + eta_mean;
            double dm = ds - s_star * std::expm1(drift * dt);
            lsum += dl;
            c += dl * dm;
            a += dl * dl;
            b += dm * dm;
            v_prev = v_next;
          }
          l_total[p] = lsum;
          unhedged[p] = payoff(ss[n_steps]) * std::exp(-bank[n_steps]);
          cross[p] = c;
          l_sq[p] = a;
          m_sq[p] = b;
        }
      },
      64);

  BacktestReport rep;
  rep.n_paths = n;
  rep.rebalance_steps = n_steps;
  rep.seed = opts.seed;
  rep.initial_value = surface.price_at(0.0, opts.s0, opts.x0, opts.y0);
  auto l_est = summarize(l_total, opts.seed);
  auto u_est = summarize(unhedged, opts.seed);
  rep.mean_residual = l_est.value;
  rep.residual_std_error = l_est.std_error;
  rep.residual_variance = l_est.std_error * l_est.std_error * static_cast<double>(n);
  rep.unhedged_variance = u_est.std_error * u_est.std_error * static_cast<double>(n);
  rep.std_ratio = rep.unhedged_variance > 0.0 ? std::sqrt(rep.residual_variance / rep.unhedged_variance) : 0.0;
  double mean_c = pairwise_sum(cross) / static_cast<double>(n);
  double mean_a = pairwise_sum(l_sq) / static_cast<double>(n);
  double mean_b = pairwise_sum(m_sq) / static_cast<double>(n);
  double scale = std::sqrt(mean_a * mean_b);
  if (scale > 0.0) {
    auto c_est = summarize(cross, opts.seed);
    rep.correlation = mean_c / scale;
    rep.correlation_std_error = c_est.std_error / scale;
  }
  for (auto m : misses) rep.coverage_misses += m;
  if (rep.coverage_misses > 0) {
    std::ostringstream os;
    os << rep.coverage_misses << " rebalance lookups fell outside the surface s-range (nearest-edge hedge ratio used)";
    rep.warnings.push_back(os.str());
  }
  return rep;
}

}  // namespace smjd

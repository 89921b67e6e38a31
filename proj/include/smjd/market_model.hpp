// Regime-switching jump-diffusion market: parameters, jump measure, exact
// path simulation under P, no-arbitrage check, minimal martingale measure.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/quadrature.hpp"
#include "smjd/semi_markov.hpp"

namespace smjd {

// ---------------------------------------------------------------------------
// Jump size and jump measure
// ---------------------------------------------------------------------------

/// eta(z) = max(min(slope * z, hi), lo).
struct ClampEta {
  double slope = 1.0;
  double lo = -0.5;
  double hi = 1.0;
};

/// Piecewise-linear eta through (z, values), flat outside.
struct TabulatedEta {
  std::vector<double> z;
  std::vector<double> values;
};

using EtaFunction = std::variant<ClampEta, TabulatedEta>;

inline double eta_value(const EtaFunction& fn, double z) {
  if (const auto* c = std::get_if<ClampEta>(&fn)) return std::max(std::min(c->slope * z, c->hi), c->lo);
  const auto& t = std::get<TabulatedEta>(fn);
  if (z <= t.z.front()) return t.values.front();
  if (z >= t.z.back()) return t.values.back();
  auto it = std::upper_bound(t.z.begin(), t.z.end(), z);
  std::size_t k = static_cast<std::size_t>(it - t.z.begin()) - 1;
  double w = (z - t.z[k]) / (t.z[k + 1] - t.z[k]);
  return t.values[k] + w * (t.values[k + 1] - t.values[k]);
}

struct JumpNode {
  double z = 0.0;
  double weight = 0.0;
};

/// Finite jump measure nu as a weighted node list, plus the jump size map eta.
class JumpSpec {
 public:
  JumpSpec() = default;

  JumpSpec(std::vector<JumpNode> nodes, EtaFunction eta) : nodes_(std::move(nodes)), eta_(std::move(eta)) {
    if (const auto* c = std::get_if<ClampEta>(&eta_)) {
      require(c->lo > -1.0 && c->lo <= c->hi && std::isfinite(c->hi) && std::isfinite(c->slope),
              "clamp eta needs -1 < lo <= hi < inf");
    } else {
      const auto& t = std::get<TabulatedEta>(eta_);
      require(!t.z.empty() && t.z.size() == t.values.size(), "eta table needs matching z and values");
      for (std::size_t k = 0; k < t.z.size(); ++k) {
        require(std::isfinite(t.values[k]) && t.values[k] > -1.0, "eta table values must be finite and > -1");
        if (k > 0) require(t.z[k] > t.z[k - 1], "eta table z must be strictly increasing");
      }
    }
    eta_at_.reserve(nodes_.size());
    cumulative_.reserve(nodes_.size());
    double acc = 0.0;
    for (const auto& n : nodes_) {
      require(std::isfinite(n.z) && std::isfinite(n.weight) && n.weight > 0.0, "jump nodes need positive finite weights");
      double e = eta_value(eta_, n.z);
      require(e > -1.0, "eta must exceed -1 at every node");
      eta_at_.push_back(e);
      acc += n.weight;
      cumulative_.push_back(acc);
    }
    mass_ = acc;
  }

  /// Discretizes a density on [a, b] by composite Simpson (zero-weight nodes dropped).
  static JumpSpec from_density(const std::function<double(double)>& density, double a, double b, int intervals,
                               EtaFunction eta) {
    require(b > a, "density interval must have b > a");
    auto rule = quad::simpson_rule(a, b, intervals);
    std::vector<JumpNode> nodes;
    for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
      double w = rule.weights[k] * density(rule.nodes[k]);
      require(std::isfinite(w) && w >= 0.0, "jump density must be finite and nonnegative");
      if (w > 0.0) nodes.push_back({rule.nodes[k], w});
    }
    return JumpSpec(std::move(nodes), std::move(eta));
  }

  /// No jumps at all.
  static JumpSpec none() { return JumpSpec({}, ClampEta{0.0, 0.0, 0.0}); }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  const std::vector<JumpNode>& nodes() const { return nodes_; }
  double z(std::size_t m) const { return nodes_[m].z; }
  double weight(std::size_t m) const { return nodes_[m].weight; }
  double eta_at(std::size_t m) const { return eta_at_[m]; }
  double eta(double z) const { return eta_value(eta_, z); }
  const EtaFunction& eta_function() const { return eta_; }
  double mass() const { return mass_; }

  /// Node index for a uniform draw u in (0, 1), inverse CDF over cumulative weights.
  std::size_t sample_node(double u) const {
    double target = u * mass_;
    auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), target);
    if (it == cumulative_.end()) --it;
    return static_cast<std::size_t>(it - cumulative_.begin());
  }

  double min_eta() const {
    return eta_at_.empty() ? 0.0 : *std::min_element(eta_at_.begin(), eta_at_.end());
  }
  double max_eta() const {
    return eta_at_.empty() ? 0.0 : *std::max_element(eta_at_.begin(), eta_at_.end());
  }

 private:
  std::vector<JumpNode> nodes_;
  EtaFunction eta_ = ClampEta{0.0, 0.0, 0.0};
  std::vector<double> eta_at_;
  std::vector<double> cumulative_;
  double mass_ = 0.0;
};

struct JumpIntegrals {
  double eta_mean = 0.0;  ///< integral of eta d nu
  double eta_sq = 0.0;    ///< integral of eta^2 d nu
  double mass = 0.0;      ///< |nu|
  double c = 0.0;         ///< integral of ((1+eta)^2 - 1) d nu / |nu|
};

inline JumpIntegrals jump_integrals(const JumpSpec& jump) {
  JumpIntegrals out;
  double second = 0.0;
  for (std::size_t m = 0; m < jump.size(); ++m) {
    double e = jump.eta_at(m);
    double w = jump.weight(m);
    out.eta_mean += e * w;
    out.eta_sq += e * e * w;
    second += ((1.0 + e) * (1.0 + e) - 1.0) * w;
  }
  out.mass = jump.mass();
  out.c = out.mass > 0.0 ? second / out.mass : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Volatility
// ---------------------------------------------------------------------------

struct ConstantVol {
  double value = 0.2;
};

/// Piecewise-linear sigma(t) through (times, values), flat outside.
struct TabulatedVol {
  std::vector<double> times;
  std::vector<double> values;
};

using VolFunction = std::variant<ConstantVol, TabulatedVol>;

inline double vol_value(const VolFunction& fn, double t) {
  if (const auto* c = std::get_if<ConstantVol>(&fn)) return c->value;
  const auto& tab = std::get<TabulatedVol>(fn);
  if (t <= tab.times.front()) return tab.values.front();
  if (t >= tab.times.back()) return tab.values.back();
  auto it = std::upper_bound(tab.times.begin(), tab.times.end(), t);
  std::size_t k = static_cast<std::size_t>(it - tab.times.begin()) - 1;
  double w = (t - tab.times[k]) / (tab.times[k + 1] - tab.times[k]);
  return tab.values[k] + w * (tab.values[k + 1] - tab.values[k]);
}

// ---------------------------------------------------------------------------
// MarketModel
// ---------------------------------------------------------------------------

struct SegmentMoments {
  double variance = 0.0;   ///< integral of sigma^2
  double phi_sq = 0.0;     ///< integral of (J sigma)^2
  double covariance = 0.0; ///< integral of J sigma^2
  double j_integral = 0.0; ///< integral of J
};

class MarketModel {
 public:
  MarketModel(RateSpec rates, std::vector<double> r, std::vector<double> mu, std::vector<VolFunction> sigma,
               JumpSpec jump, double horizon, int simpson_intervals = 4)
      : rates_(std::move(rates)),
        r_(std::move(r)),
        mu_(std::move(mu)),
        sigma_(std::move(sigma)),
        jump_(std::move(jump)),
        horizon_(horizon),
        simpson_intervals_(simpson_intervals) {
    const std::size_t k = rates_.num_states();
    require(k > 0, "model needs at least one regime");
    require(r_.size() == k && mu_.size() == k && sigma_.size() == k,
            "r, mu and sigma must have one entry per regime");
    require(horizon_ > 0.0 && std::isfinite(horizon_), "horizon T must be positive");
    require(simpson_intervals_ >= 2 && simpson_intervals_ % 2 == 0, "Simpson sub-grid needs an even count");
    sigma_min_ = kInf;
    sigma_max_ = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      require(std::isfinite(r_[i]) && std::isfinite(mu_[i]), "r and mu must be finite");
      if (const auto* c = std::get_if<ConstantVol>(&sigma_[i])) {
        sigma_min_ = std::min(sigma_min_, c->value);
        sigma_max_ = std::max(sigma_max_, c->value);
      } else {
        const auto& t = std::get<TabulatedVol>(sigma_[i]);
        require(!t.times.empty() && t.times.size() == t.values.size(), "sigma table needs matching times and values");
        for (std::size_t n = 0; n < t.times.size(); ++n) {
          if (n > 0) require(t.times[n] > t.times[n - 1], "sigma table times must be strictly increasing");
          sigma_min_ = std::min(sigma_min_, t.values[n]);
          sigma_max_ = std::max(sigma_max_, t.values[n]);
        }
      }
    }
    require(sigma_min_ > 0.0 && std::isfinite(sigma_max_), "sigma must be positive and finite");
    integrals_ = smjd::jump_integrals(jump_);
  }

  std::size_t num_regimes() const { return r_.size(); }
  const RateSpec& rates() const { return rates_; }
  const JumpSpec& jump() const { return jump_; }
  const JumpIntegrals& jump_integrals() const { return integrals_; }
  double horizon() const { return horizon_; }
  double r(std::size_t i) const { return r_.at(i); }
  double mu(std::size_t i) const { return mu_.at(i); }
  const std::vector<double>& r_values() const { return r_; }
  const std::vector<double>& mu_values() const { return mu_; }
  const VolFunction& sigma_function(std::size_t i) const { return sigma_.at(i); }
  double sigma(double t, std::size_t i) const { return vol_value(sigma_.at(i), t); }
  double sigma_min() const { return sigma_min_; }
  double sigma_max() const { return sigma_max_; }
  bool constant_sigma(std::size_t i) const { return std::holds_alternative<ConstantVol>(sigma_.at(i)); }
  int simpson_intervals() const { return simpson_intervals_; }

  /// Times where sigma(., i) has kinks (empty for constant sigma).
  std::vector<double> breakpoints(std::size_t i) const {
    if (const auto* t = std::get_if<TabulatedVol>(&sigma_.at(i))) return t->times;
    return {};
  }

  /// Sample times at which sigma(., i) attains its extremes on [0, T].
  std::vector<double> extreme_times(std::size_t i) const {
    std::vector<double> ts{0.0, horizon_};
    for (double b : breakpoints(i))
      if (b > 0.0 && b < horizon_) ts.push_back(b);
    return ts;
  }

  /// Integral of f(t) over [a, b] in regime i: split at sigma-table kinks,
  /// composite Simpson on each piece. Simulator and pricer share this.
  template <class F>
  double integrate(std::size_t i, double a, double b, F&& f) const {
    if (b <= a) return 0.0;
    double total = 0.0;
    double lo = a;
    for (double k : breakpoints(i)) {
      if (k <= lo) continue;
      if (k >= b) break;
      total += quad::simpson(f, lo, k, simpson_intervals_);
      lo = k;
    }
    return total + quad::simpson(f, lo, b, simpson_intervals_);
  }

  double integrated_variance(std::size_t i, double a, double b) const {
    if (constant_sigma(i)) {
      double s = sigma(0.0, i);
      return s * s * (b - a);
    }
    return integrate(i, a, b, [&](double t) {
      double s = sigma(t, i);
      return s * s;
    });
  }

  /// J(t, i) = (r - mu - int eta dnu) / (sigma^2 + int eta^2 dnu).
  double mmm_ratio(double t, std::size_t i) const {
    double s = sigma(t, i);
    return (r_[i] - mu_[i] - integrals_.eta_mean) / (s * s + integrals_.eta_sq);
  }

  SegmentMoments segment_moments(std::size_t i, double a, double b) const {
    SegmentMoments m;
    if (b <= a) return m;
    if (constant_sigma(i)) {
      double s = sigma(0.0, i);
      double j = mmm_ratio(0.0, i);
      double dt = b - a;
      m.variance = s * s * dt;
      m.phi_sq = j * j * s * s * dt;
      m.covariance = j * s * s * dt;
      m.j_integral = j * dt;
      return m;
    }
    m.variance = integrated_variance(i, a, b);
    m.phi_sq = integrate(i, a, b, [&](double t) {
      double s = sigma(t, i);
      double j = mmm_ratio(t, i);
      return j * j * s * s;
    });
    m.covariance = integrate(i, a, b, [&](double t) {
      double s = sigma(t, i);
      return mmm_ratio(t, i) * s * s;
    });
    m.j_integral = integrate(i, a, b, [&](double t) { return mmm_ratio(t, i); });
    return m;
  }

 private:
  RateSpec rates_;
  std::vector<double> r_;
  std::vector<double> mu_;
  std::vector<VolFunction> sigma_;
  JumpSpec jump_;
  double horizon_;
  int simpson_intervals_;
  JumpIntegrals integrals_;
  double sigma_min_ = 0.0;
  double sigma_max_ = 0.0;
};

// ---------------------------------------------------------------------------
// Minimal martingale measure
// ---------------------------------------------------------------------------

struct EmmCoefficients {
  double j = 0.0;
  double girsanov_drift = 0.0;  ///< J sigma, the Brownian drift shift
  std::vector<double> gamma;    ///< J eta(z_m) + 1 at every nu-node
};

inline EmmCoefficients mmm_coefficients(const MarketModel& model, double t, std::size_t i) {
  EmmCoefficients out;
  out.j = model.mmm_ratio(t, i);
  out.girsanov_drift = out.j * model.sigma(t, i);
  const auto& jump = model.jump();
  out.gamma.resize(jump.size());
  for (std::size_t m = 0; m < jump.size(); ++m) out.gamma[m] = out.j * jump.eta_at(m) + 1.0;
  return out;
}

struct NoArbitrageReport {
  bool passed = true;
  double worst_value = 0.0;   ///< min over (t, i, z) of J eta(z); must exceed -1
  double worst_margin = kInf; ///< worst_value + 1
  double witness_t = 0.0;
  std::size_t witness_regime = 0;
  double witness_z = kNaN;
};

/// Evaluates J(t, i) eta(z) > -1 at every (t in grid, regime, nu-node).
inline NoArbitrageReport check_no_arbitrage(const MarketModel& model, std::span<const double> t_grid) {
  NoArbitrageReport rep;
  rep.worst_value = kInf;
  const auto& jump = model.jump();
  for (double t : t_grid) {
    for (std::size_t i = 0; i < model.num_regimes(); ++i) {
      double j = model.mmm_ratio(t, i);
      for (std::size_t m = 0; m < jump.size(); ++m) {
        double v = j * jump.eta_at(m);
        if (v < rep.worst_value) {
          rep.worst_value = v;
          rep.witness_t = t;
          rep.witness_regime = i;
          rep.witness_z = jump.z(m);
        }
      }
    }
  }
  if (jump.empty() || t_grid.empty()) rep.worst_value = 0.0;
  rep.worst_margin = rep.worst_value + 1.0;
  rep.passed = rep.worst_margin > 0.0;
  return rep;
}

/// Uniform grid of n points on [0, T].
inline std::vector<double> uniform_times(double horizon, std::size_t n) {
  std::vector<double> ts(std::max<std::size_t>(n, 2));
  for (std::size_t k = 0; k < ts.size(); ++k) ts[k] = horizon * static_cast<double>(k) / static_cast<double>(ts.size() - 1);
  return ts;
}

struct MvTradeoff {
  double delta_c = 0.0;    ///< dC / d<G>
  double khat_rate = 0.0;  ///< integrand of the mean-variance tradeoff process
};

inline MvTradeoff mv_tradeoff(const MarketModel& model, double t, std::size_t i, double s_star) {
  require(s_star > 0.0, "discounted price must be positive");
  const auto& ji = model.jump_integrals();
  double s = model.sigma(t, i);
  double excess = model.mu(i) - model.r(i) + ji.eta_mean;
  double denom = s * s + ji.eta_sq;
  return MvTradeoff{excess / (s_star * denom), excess * excess / denom};
}

// ---------------------------------------------------------------------------
// Path simulation under P
// ---------------------------------------------------------------------------

enum class PathEvent { grid, regime, jump };

inline const char* to_string(PathEvent e) {
  switch (e) {
    case PathEvent::grid: return "grid";
    case PathEvent::regime: return "regime";
    case PathEvent::jump: return "jump";
  }
  return "?";
}

struct PathPoint {
  double t = 0.0;
  double s = 0.0;
  std::size_t regime = 0;
  double age = 0.0;
  PathEvent event = PathEvent::grid;
  double z = kNaN;        ///< jump mark (jump events only)
  double log_bank = 0.0;  ///< integral of r over [0, t]
};

/// Diffusive stretch with constant regime and its Brownian integrals.
struct PathSegment {
  double t0 = 0.0;
  double t1 = 0.0;
  std::size_t regime = 0;
  double sigma_dw = 0.0;  ///< integral of sigma dW
  double phi_dw = 0.0;    ///< integral of (J sigma) dW
};

struct JumpMark {
  double t = 0.0;
  std::size_t node = 0;
  double z = 0.0;
  std::size_t regime = 0;
};

struct PathRecord {
  std::vector<PathPoint> points;
  std::vector<PathSegment> segments;
  std::vector<JumpMark> jumps;

  const PathPoint& terminal() const { return points.back(); }
};

/// Exact-in-law simulation: regime epochs by hazard inversion, price jumps as
/// a Poisson process of rate |nu|, lognormal diffusion between events.
inline PathRecord simulate_asset_path(const MarketModel& model, double s0, std::size_t x0, double y0,
                                      RandomStream& rng, std::span<const double> record_grid) {
  require(s0 > 0.0, "initial price must be positive");
  require(y0 >= 0.0, "initial age must be nonnegative");
  model.rates().check_state(x0);
  require(!record_grid.empty(), "record grid must not be empty");
  for (std::size_t g = 0; g < record_grid.size(); ++g) {
    require(record_grid[g] > 0.0, "record grid times must be positive");
    if (g > 0) require(record_grid[g] > record_grid[g - 1], "record grid must be increasing");
  }

  PathRecord rec;
  const auto& jump = model.jump();
  const double mass = jump.mass();

  double t = 0.0;
  std::size_t x = x0;
  double regime_start = -y0;  // age = t - regime_start
  double log_s = std::log(s0);
  double log_bank = 0.0;
  rec.points.push_back({0.0, s0, x, y0, PathEvent::grid, kNaN, 0.0});

  Transition tr = sample_transition(model.rates(), x, y0, rng);
  double next_regime = tr.holding;
  double next_jump = mass > 0.0 ? rng.exponential() / mass : kInf;

  auto advance = [&](double t1) {
    if (t1 <= t) return;
    SegmentMoments m = model.segment_moments(x, t, t1);
    double n1 = rng.normal();
    double a = std::sqrt(m.variance) * n1;
    double b = 0.0;
    if (m.variance > 0.0) {
      b = m.covariance / std::sqrt(m.variance) * n1;
      double resid = m.phi_sq - m.covariance * m.covariance / m.variance;
      if (resid > 1e-12 * m.phi_sq) b += std::sqrt(resid) * rng.normal();
    }
    log_s += model.mu(x) * (t1 - t) - 0.5 * m.variance + a;
    log_bank += model.r(x) * (t1 - t);
    rec.segments.push_back({t, t1, x, a, b});
    t = t1;
  };

  std::size_t g = 0;
  while (g < record_grid.size()) {
    double grid_t = record_grid[g];
    if (grid_t <= next_regime && grid_t <= next_jump) {
      advance(grid_t);
      rec.points.push_back({t, std::exp(log_s), x, t - regime_start, PathEvent::grid, kNaN, log_bank});
      ++g;
    } else if (next_regime <= next_jump) {
      advance(next_regime);
      x = tr.next;
      regime_start = t;
      rec.points.push_back({t, std::exp(log_s), x, 0.0, PathEvent::regime, kNaN, log_bank});
      tr = sample_transition(model.rates(), x, 0.0, rng);
      next_regime = t + tr.holding;
    } else {
      advance(next_jump);
      std::size_t node = jump.sample_node(rng.uniform());
      log_s += std::log1p(jump.eta_at(node));
      rec.jumps.push_back({t, node, jump.z(node), x});
      rec.points.push_back({t, std::exp(log_s), x, t - regime_start, PathEvent::jump, jump.z(node), log_bank});
      next_jump = t + rng.exponential() / mass;
    }
    if (!std::isfinite(log_s)) throw NumericalError("simulated price is not finite");
  }
  return rec;
}

/// Z_T = exp(int phi dW - 1/2 int phi^2 + sum ln Gamma(z) - int int (Gamma - 1) dnu dt).
inline double radon_nikodym_path(const MarketModel& model, const PathRecord& path) {
  const auto& ji = model.jump_integrals();
  double log_z = 0.0;
  for (const auto& seg : path.segments) {
    SegmentMoments m = model.segment_moments(seg.regime, seg.t0, seg.t1);
    log_z += seg.phi_dw - 0.5 * m.phi_sq - m.j_integral * ji.eta_mean;
  }
  for (const auto& jm : path.jumps) {
    double gamma = model.mmm_ratio(jm.t, jm.regime) * model.jump().eta_at(jm.node) + 1.0;
    if (!(gamma > 0.0)) throw ValidationError("Gamma <= 0 at a jump node: no-arbitrage condition violated");
    log_z += std::log(gamma);
  }
  return std::exp(log_z);
}

}  // namespace smjd

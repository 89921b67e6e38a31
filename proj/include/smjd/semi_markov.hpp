// Age-dependent semi-Markov regime process (X, Y): transition rates, holding
// time law, embedded chain, exact simulation by hazard inversion, generator.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "smjd/core.hpp"
#include "smjd/quadrature.hpp"

namespace smjd {

// ---------------------------------------------------------------------------
// Rate families
// ---------------------------------------------------------------------------

struct ConstantRate {
  double value = 0.0;
};

/// Weibull hazard lambda(y) = scale * shape * y^(shape - 1), so Lambda(y) = scale * y^shape.
struct WeibullRate {
  double scale = 1.0;
  double shape = 1.0;
};

/// Piecewise-linear rate through (ages, values), held flat outside the table.
struct TabulatedRate {
  std::vector<double> ages;
  std::vector<double> values;
};

using RateFunction = std::variant<ConstantRate, WeibullRate, TabulatedRate>;

namespace detail {

inline double table_value(const TabulatedRate& t, double y) {
  if (y <= t.ages.front()) return t.values.front();
  if (y >= t.ages.back()) return t.values.back();
  auto it = std::upper_bound(t.ages.begin(), t.ages.end(), y);
  std::size_t k = static_cast<std::size_t>(it - t.ages.begin()) - 1;
  double w = (y - t.ages[k]) / (t.ages[k + 1] - t.ages[k]);
  return t.values[k] + w * (t.values[k + 1] - t.values[k]);
}

// Exact integral of the piecewise-linear interpolant over [0, y].
inline double table_integral(const TabulatedRate& t, double y) {
  if (y <= 0.0) return 0.0;
  double total = 0.0;
  double lo = 0.0;
  auto add_piece = [&](double a, double b) {
    if (b <= a) return;
    total += 0.5 * (b - a) * (table_value(t, a) + table_value(t, b));
  };
  if (lo < t.ages.front()) {
    double b = std::min(y, t.ages.front());
    total += t.values.front() * (b - lo);
    lo = b;
  }
  for (std::size_t k = 0; k + 1 < t.ages.size() && lo < y; ++k) {
    double a = std::max(lo, t.ages[k]);
    double b = std::min(y, t.ages[k + 1]);
    if (b > a) {
      add_piece(a, b);
      lo = b;
    }
  }
  if (y > lo) total += t.values.back() * (y - lo);
  return total;
}

}  // namespace detail

inline double rate_value(const RateFunction& fn, double y) {
  return std::visit(
      [y](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, ConstantRate>) {
          return f.value;
        } else if constexpr (std::is_same_v<T, WeibullRate>) {
          if (f.shape == 1.0) return f.scale;
          if (y == 0.0) return f.shape > 1.0 ? 0.0 : kInf;
          return f.scale * f.shape * std::pow(y, f.shape - 1.0);
        } else {
          return detail::table_value(f, y);
        }
      },
      fn);
}

/// Integral of the rate over [0, y].
inline double rate_integral(const RateFunction& fn, double y) {
  return std::visit(
      [y](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, ConstantRate>) {
          return f.value * y;
        } else if constexpr (std::is_same_v<T, WeibullRate>) {
          return f.scale * std::pow(y, f.shape);
        } else {
          return detail::table_integral(f, y);
        }
      },
      fn);
}

/// Age beyond which the rate no longer changes (infinity if never).
inline double constant_after(const RateFunction& fn) {
  return std::visit(
      [](const auto& f) -> double {
        using T = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<T, ConstantRate>) {
          return 0.0;
        } else if constexpr (std::is_same_v<T, WeibullRate>) {
          return f.shape == 1.0 ? 0.0 : kInf;
        } else {
          return f.ages.back();
        }
      },
      fn);
}

/// Power-law exponent if Lambda(y) = C * y^k analytically, else nullopt.
inline std::optional<double> power_law_shape(const RateFunction& fn) {
  if (const auto* c = std::get_if<ConstantRate>(&fn)) return c->value >= 0.0 ? std::optional(1.0) : std::nullopt;
  if (const auto* w = std::get_if<WeibullRate>(&fn)) return w->shape;
  return std::nullopt;
}

inline double power_law_scale(const RateFunction& fn) {
  if (const auto* c = std::get_if<ConstantRate>(&fn)) return c->value;
  if (const auto* w = std::get_if<WeibullRate>(&fn)) return w->scale;
  return kNaN;
}

// ---------------------------------------------------------------------------
// RateSpec
// ---------------------------------------------------------------------------

struct RateEntry {
  std::size_t from = 0;  // zero-based
  std::size_t to = 0;
  RateFunction fn;
};

struct RegimeState {
  std::size_t x = 0;
  double y = 0.0;
};

/// Transition rates lambda_ij(y) of a semi-Markov process on {0, ..., k-1}.
/// Pairs without an entry have rate zero. Immutable after construction.
class RateSpec {
 public:
  RateSpec() = default;

  RateSpec(std::size_t states, std::vector<RateEntry> entries) : states_(states), rates_(states * states) {
    for (auto& e : entries) {
      require(e.from < states && e.to < states, "rate entry refers to an unknown state");
      require(e.from != e.to, "rate entry must connect distinct states");
      validate_function(e.fn);
      rates_[e.from * states + e.to] = std::move(e.fn);
    }
  }

  std::size_t num_states() const { return states_; }

  const std::optional<RateFunction>& rate_function(std::size_t i, std::size_t j) const {
    check_state(i);
    check_state(j);
    return rates_[i * states_ + j];
  }

  double rate(std::size_t i, std::size_t j, double y) const {
    const auto& fn = rate_function(i, j);
    return (i == j || !fn) ? 0.0 : rate_value(*fn, y);
  }

  /// lambda_i(y): total exit rate from i at age y.
  double total_rate(std::size_t i, double y) const {
    check_state(i);
    double sum = 0.0;
    for (std::size_t j = 0; j < states_; ++j)
      if (j != i && rates_[i * states_ + j]) sum += rate_value(*rates_[i * states_ + j], y);
    return sum;
  }

  /// Lambda_i(y) = integral of lambda_i over [0, y].
  double cumulative_hazard(std::size_t i, double y) const {
    check_state(i);
    require(y >= 0.0, "age must be nonnegative");
    double sum = 0.0;
    for (std::size_t j = 0; j < states_; ++j)
      if (j != i && rates_[i * states_ + j]) sum += rate_integral(*rates_[i * states_ + j], y);
    return sum;
  }

  /// F(y|i) = 1 - exp(-Lambda_i(y)).
  double holding_cdf(std::size_t i, double y) const { return -std::expm1(-cumulative_hazard(i, y)); }

  double survival(std::size_t i, double y) const { return std::exp(-cumulative_hazard(i, y)); }

  /// Survival from age y to age y + h given survival to y.
  double conditional_survival(std::size_t i, double y, double h) const {
    return std::exp(-(cumulative_hazard(i, y + h) - cumulative_hazard(i, y)));
  }

  /// f(y|i) = lambda_i(y) (1 - F(y|i)).
  double holding_density(std::size_t i, double y) const { return total_rate(i, y) * survival(i, y); }

  /// p_ij(y) = lambda_ij(y) / lambda_i(y), p_ii = 0.
  std::vector<double> embedded_probs(std::size_t i, double y) const {
    double total = total_rate(i, y);
    if (!(total > 0.0)) {
      std::ostringstream os;
      os << "total exit rate of state " << i + 1 << " is zero at age " << y;
      throw ValidationError(os.str());
    }
    std::vector<double> p(states_, 0.0);
    for (std::size_t j = 0; j < states_; ++j)
      if (j != i) p[j] = rate(i, j, y) / total;
    return p;
  }

  /// Embedded probabilities, taking the right limit where lambda_i vanishes
  /// (e.g. a Weibull hazard at age zero).
  std::vector<double> embedded_probs_limit(std::size_t i, double y) const {
    double probe = y;
    for (int k = 0; k < 60 && !(total_rate(i, probe) > 0.0); ++k) probe = y + std::ldexp(1e-12, k);
    return embedded_probs(i, probe);
  }

  /// True when every rate is constant in age (the Markov special case).
  bool is_markov() const { return constant_after_all() == 0.0; }

  /// Age beyond which no rate changes any more.
  double constant_after_all() const {
    double a = 0.0;
    for (const auto& r : rates_)
      if (r) a = std::max(a, constant_after(*r));
    return a;
  }

  bool has_exits(std::size_t i) const {
    check_state(i);
    for (std::size_t j = 0; j < states_; ++j)
      if (j != i && rates_[i * states_ + j]) return true;
    return false;
  }

  void check_state(std::size_t i) const {
    if (i >= states_) {
      std::ostringstream os;
      os << "unknown state " << i + 1 << " (spec has " << states_ << " states)";
      throw ValidationError(os.str());
    }
  }

 private:
  static void validate_function(const RateFunction& fn) {
    if (const auto* c = std::get_if<ConstantRate>(&fn)) {
      require(std::isfinite(c->value), "non-finite constant rate");
    } else if (const auto* w = std::get_if<WeibullRate>(&fn)) {
      require(std::isfinite(w->scale) && std::isfinite(w->shape) && w->shape > 0.0,
              "Weibull rate needs finite scale and positive shape");
    } else {
      const auto& t = std::get<TabulatedRate>(fn);
      require(!t.ages.empty() && t.ages.size() == t.values.size(), "rate table needs matching ages and values");
      require(t.ages.front() >= 0.0, "rate table ages must be nonnegative");
      for (std::size_t k = 0; k < t.ages.size(); ++k) {
        require(std::isfinite(t.ages[k]) && std::isfinite(t.values[k]), "non-finite rate table entry");
        if (k > 0) require(t.ages[k] > t.ages[k - 1], "rate table ages must be strictly increasing");
      }
    }
  }

  std::size_t states_ = 0;
  std::vector<std::optional<RateFunction>> rates_;
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

struct RateCheck {
  std::string name;
  bool passed = true;
  std::string detail;
  // Witness of the first failure (zero-based states; `to` is npos for state-level checks).
  std::size_t from = 0;
  std::size_t to = static_cast<std::size_t>(-1);
  double age = 0.0;
};

struct ValidationReport {
  std::vector<RateCheck> checks;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const RateCheck& c) { return c.passed; });
  }
};

struct RateValidationOptions {
  double rate_bound = 1e6;            ///< declared upper bound for every lambda_ij
  double divergence_threshold = 30.0;  ///< proxy for Lambda_i(inf) = inf
  std::size_t grid_points = 2001;
};

/// Checks positivity, boundedness on [0, y_max] and divergence of the
/// cumulative hazard. Analytic families with positive parameters diverge
/// exactly; tabulated-only exits use Lambda_i(y_max) >= threshold.
inline ValidationReport validate_rates(const RateSpec& spec, double y_max, const RateValidationOptions& opts = {}) {
  require(y_max > 0.0, "y_max must be positive");
  const std::size_t k = spec.num_states();
  if (k == 0) throw ValidationError("rate spec has an empty state set");

  RateCheck positivity{"positivity", true, "all rates positive on the age grid"};
  RateCheck boundedness{"boundedness", true, "all rates bounded on the age grid"};
  RateCheck divergence{"hazard_divergence", true, "cumulative hazards diverge"};

  const std::size_t n = std::max<std::size_t>(opts.grid_points, 2);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      for (std::size_t g = 0; g < n; ++g) {
        double y = y_max * static_cast<double>(g) / static_cast<double>(n - 1);
        double v = spec.rate(i, j, y);
        if (std::isnan(v)) throw ValidationError("non-finite rate value");
        if (positivity.passed && !(v > 0.0)) {
          positivity.passed = false;
          positivity.from = i;
          positivity.to = j;
          positivity.age = y;
          std::ostringstream os;
          os << "lambda_" << i + 1 << j + 1 << "(" << y << ") = " << v << " is not positive";
          positivity.detail = os.str();
        }
        if (boundedness.passed && !(v <= opts.rate_bound)) {
          boundedness.passed = false;
          boundedness.from = i;
          boundedness.to = j;
          boundedness.age = y;
          std::ostringstream os;
          os << "lambda_" << i + 1 << j + 1 << "(" << y << ") = " << v << " exceeds bound " << opts.rate_bound;
          boundedness.detail = os.str();
        }
      }
    }
    if (k == 1 || !divergence.passed) continue;
    bool analytic = false;
    for (std::size_t j = 0; j < k; ++j) {
      const auto& fn = spec.rate_function(i, j);
      if (i == j || !fn) continue;
      if (auto shape = power_law_shape(*fn); shape && power_law_scale(*fn) > 0.0 && *shape > 0.0) analytic = true;
    }
    if (analytic) continue;
    double lam = spec.cumulative_hazard(i, y_max);
    if (!std::isfinite(lam)) throw ValidationError("non-finite cumulative hazard");
    if (lam < opts.divergence_threshold) {
      divergence.passed = false;
      divergence.from = i;
      divergence.age = y_max;
      std::ostringstream os;
      os << "Lambda_" << i + 1 << "(" << y_max << ") = " << lam << " < " << opts.divergence_threshold;
      divergence.detail = os.str();
    }
  }
  if (k == 1) divergence.detail = "single state: no transitions";
  return ValidationReport{{positivity, boundedness, divergence}};
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

struct Transition {
  double holding = kInf;  ///< time until the next transition (infinite if none)
  std::size_t next = 0;
};

namespace detail {

// Solves Lambda_i(y0 + h) - Lambda_i(y0) = target for h: bracketing by
// doubling, then bisection followed by safeguarded secant steps.
inline double invert_hazard(const RateSpec& spec, std::size_t i, double y0, double target) {
  const double base = spec.cumulative_hazard(i, y0);
  auto g = [&](double h) { return spec.cumulative_hazard(i, y0 + h) - base - target; };
  double lo = 0.0;
  double hi = 1.0 / std::max(spec.total_rate(i, y0), 1e-3);
  int expansions = 0;
  while (g(hi) < 0.0) {
    lo = hi;
    hi *= 2.0;
    if (++expansions > 200 || !std::isfinite(hi)) throw NumericalError("hazard inversion could not bracket a root");
  }
  const double tol = 1e-10;
  double glo = g(lo);
  double ghi = g(hi);
  int iter = 0;
  // Bisection until the bracket is small relative to its position.
  while (hi - lo > 1e-3 * std::max(1.0, hi) && iter < 200) {
    double mid = 0.5 * (lo + hi);
    double gm = g(mid);
    if (gm < 0.0) {
      lo = mid;
      glo = gm;
    } else {
      hi = mid;
      ghi = gm;
    }
    ++iter;
  }
  double x0 = lo;
  double x1 = hi;
  double g0 = glo;
  double g1 = ghi;
  while (iter < 200) {
    double x = (g1 != g0) ? x1 - g1 * (x1 - x0) / (g1 - g0) : 0.5 * (lo + hi);
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);
    double gx = g(x);
    if (gx < 0.0) {
      lo = x;
    } else {
      hi = x;
    }
    if (std::abs(x - x1) < tol || hi - lo < tol || gx == 0.0) return x;
    x0 = x1;
    g0 = g1;
    x1 = x;
    g1 = gx;
    ++iter;
  }
  throw NumericalError("hazard inversion did not converge within 200 iterations");
}

}  // namespace detail

/// Draws the residual holding time from age y0 and the next state.
inline Transition sample_transition(const RateSpec& spec, std::size_t i, double y0, RandomStream& rng) {
  spec.check_state(i);
  require(y0 >= 0.0, "age must be nonnegative");
  if (!spec.has_exits(i)) return Transition{kInf, i};

  const double target = rng.exponential();

  // Analytic inverse when Lambda_i(y) = C y^k.
  std::optional<double> shape;
  double scale = 0.0;
  bool power_law = true;
  for (std::size_t j = 0; j < spec.num_states() && power_law; ++j) {
    const auto& fn = spec.rate_function(i, j);
    if (j == i || !fn) continue;
    auto s = power_law_shape(*fn);
    if (!s || (shape && *shape != *s)) {
      power_law = false;
    } else {
      shape = s;
      scale += power_law_scale(*fn);
    }
  }

  double holding;
  if (power_law && shape && scale > 0.0) {
    double k = *shape;
    double y1 = std::pow(std::pow(y0, k) + target / scale, 1.0 / k);
    holding = y1 - y0;
    if (k == 1.0) holding = target / scale;
  } else if (power_law && scale <= 0.0) {
    throw NumericalError("state has no positive exit rate; hazard cannot be inverted");
  } else {
    holding = detail::invert_hazard(spec, i, y0, target);
  }

  auto p = spec.embedded_probs_limit(i, y0 + holding);
  double u = rng.uniform();
  double acc = 0.0;
  std::size_t next = i;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    next = j;
    acc += p[j];
    if (u <= acc) break;
  }
  return Transition{holding, next};
}

struct RegimeJump {
  double time = 0.0;
  std::size_t from = 0;
  std::size_t to = 0;
};

/// Piecewise-constant regime trajectory on [0, horizon].
struct RegimePath {
  std::size_t x0 = 0;
  double y0 = 0.0;
  double horizon = 0.0;
  std::vector<RegimeJump> transitions;

  /// (X_t, Y_t); X is right-continuous, Y resets to 0 at each transition.
  RegimeState state_at(double t) const {
    RegimeState s{x0, y0 + t};
    for (const auto& tr : transitions) {
      if (tr.time > t) break;
      s.x = tr.to;
      s.y = t - tr.time;
    }
    return s;
  }
};

inline RegimePath simulate_regime_path(const RateSpec& spec, std::size_t x0, double y0, double horizon,
                                       RandomStream& rng) {
  require(horizon > 0.0, "horizon must be positive");
  spec.check_state(x0);
  RegimePath path{x0, y0, horizon, {}};
  double t = 0.0;
  std::size_t x = x0;
  double age = y0;
  while (true) {
    Transition tr = sample_transition(spec, x, age, rng);
    double next_time = t + tr.holding;
    if (!(next_time <= horizon)) break;
    path.transitions.push_back({next_time, x, tr.next});
    t = next_time;
    x = tr.next;
    age = 0.0;
  }
  return path;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// A phi(i, y) = d phi/dy (i, y) + sum_j lambda_ij(y) (phi(j, 0) - phi(i, y)).
inline double apply_generator(const RateSpec& spec, const std::function<double(std::size_t, double)>& fn,
                              std::size_t i, double y, double step = 1e-6) {
  spec.check_state(i);
  require(y >= 0.0, "age must be nonnegative");
  double dy;
  if (y >= step) {
    dy = (fn(i, y + step) - fn(i, y - step)) / (2.0 * step);
  } else {
    dy = (-3.0 * fn(i, y) + 4.0 * fn(i, y + step) - fn(i, y + 2.0 * step)) / (2.0 * step);
  }
  double here = fn(i, y);
  double jump = 0.0;
  for (std::size_t j = 0; j < spec.num_states(); ++j)
    if (j != i) jump += spec.rate(i, j, y) * (fn(j, 0.0) - here);
  return dy + jump;
}

}  // namespace smjd

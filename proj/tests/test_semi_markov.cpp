#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "smjd/semi_markov.hpp"

using namespace smjd;

namespace {

RateSpec two_state_constant(double l12, double l21) {
  return RateSpec(2, {{0, 1, ConstantRate{l12}}, {1, 0, ConstantRate{l21}}});
}

// lambda_12(y) = 2y (Weibull with Lambda = y^2), lambda_21 = 1.5.
RateSpec two_state_weibull() { return RateSpec(2, {{0, 1, WeibullRate{1.0, 2.0}}, {1, 0, ConstantRate{1.5}}}); }

}  // namespace

// ---------------------------------------------------------------------------
// Analytic objects
// ---------------------------------------------------------------------------

TEST(CumulativeHazard, ConstantRate) {
  auto spec = two_state_constant(2.0, 1.0);
  EXPECT_DOUBLE_EQ(spec.cumulative_hazard(0, 0.5), 1.0);
  EXPECT_EQ(spec.cumulative_hazard(0, 0.0), 0.0);
}

TEST(CumulativeHazard, WeibullCubic) {
  // hazard 3 y^2 integrates to y^3.
  RateSpec spec(2, {{0, 1, WeibullRate{1.0, 3.0}}, {1, 0, ConstantRate{1.0}}});
  EXPECT_NEAR(spec.cumulative_hazard(0, 2.0), 8.0, 1e-12);
  EXPECT_NEAR(spec.rate(0, 1, 2.0), 12.0, 1e-12);
}

TEST(CumulativeHazard, TabulatedMatchesTrapezoidOfLinearPieces) {
  RateSpec spec(2, {{0, 1, TabulatedRate{{0.0, 1.0, 3.0}, {1.0, 3.0, 2.0}}}, {1, 0, ConstantRate{1.0}}});
  // Exact area of the piecewise-linear rate, flat beyond the table.
  EXPECT_NEAR(spec.cumulative_hazard(0, 1.0), 2.0, 1e-12);
  EXPECT_NEAR(spec.cumulative_hazard(0, 3.0), 2.0 + 5.0, 1e-12);
  EXPECT_NEAR(spec.cumulative_hazard(0, 4.0), 7.0 + 2.0, 1e-12);
}

TEST(CumulativeHazard, UnknownStateThrows) {
  auto spec = two_state_constant(1.0, 1.0);
  EXPECT_THROW(spec.cumulative_hazard(5, 1.0), ValidationError);
}

TEST(HoldingCdf, Examples) {
  RateSpec unit(2, {{0, 1, ConstantRate{1.0}}, {1, 0, ConstantRate{1.0}}});
  EXPECT_NEAR(unit.holding_cdf(0, 1.0), 1.0 - std::exp(-1.0), 1e-15);
  EXPECT_EQ(unit.holding_cdf(0, 0.0), 0.0);
  auto spec = two_state_constant(2.0, 1.0);
  for (double y = 0.0; y <= 5.0; y += 0.125) EXPECT_NEAR(spec.holding_cdf(0, y), 1.0 - std::exp(-2.0 * y), 1e-15);
}

TEST(HoldingCdf, MonotoneDensityAndHazardIdentity) {
  RateSpec spec(3, {{0, 1, WeibullRate{0.7, 1.6}},
                    {0, 2, TabulatedRate{{0.0, 1.0, 2.0}, {0.5, 1.5, 0.8}}},
                    {1, 0, ConstantRate{1.2}},
                    {1, 2, WeibullRate{2.0, 0.8}},
                    {2, 0, ConstantRate{0.4}},
                    {2, 1, ConstantRate{0.9}}});
  for (std::size_t i = 0; i < 3; ++i) {
    double prev = 0.0;
    for (double y = 0.05; y <= 4.0; y += 0.05) {
      double f = spec.holding_cdf(i, y);
      EXPECT_GE(f, prev);
      EXPECT_LT(f, 1.0);
      prev = f;
      const double h = 1e-6;
      double diff = (spec.holding_cdf(i, y + h) - spec.holding_cdf(i, y - h)) / (2 * h);
      EXPECT_NEAR(diff, spec.holding_density(i, y), 1e-4);
      // lambda_ij = p_ij f / (1 - F)
      auto p = spec.embedded_probs(i, y);
      for (std::size_t j = 0; j < 3; ++j) {
        if (j == i) continue;
        double rebuilt = p[j] * spec.holding_density(i, y) / (1.0 - spec.holding_cdf(i, y));
        EXPECT_NEAR(rebuilt, spec.rate(i, j, y), 1e-10);
      }
    }
  }
}

TEST(EmbeddedProbs, Examples) {
  auto two = two_state_constant(0.3, 0.7);
  EXPECT_EQ(two.embedded_probs(0, 1.0)[1], 1.0);
  RateSpec three(3, {{0, 1, ConstantRate{1.0}}, {0, 2, ConstantRate{3.0}}, {1, 0, ConstantRate{1.0}}, {2, 0, ConstantRate{1.0}}});
  auto p = three.embedded_probs(0, 0.3);
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
  EXPECT_NEAR(p[2], 0.75, 1e-15);
  // lambda_12(y) = y (Weibull with Lambda = y^2 / 2) and lambda_13 = 1 at y = 1.
  RateSpec aged(3, {{0, 1, WeibullRate{0.5, 2.0}}, {0, 2, ConstantRate{1.0}}, {1, 0, ConstantRate{1.0}}, {2, 0, ConstantRate{1.0}}});
  auto q = aged.embedded_probs(0, 1.0);
  EXPECT_NEAR(q[1], 0.5, 1e-12);
  EXPECT_NEAR(q[2], 0.5, 1e-12);
  EXPECT_NEAR(q[0] + q[1] + q[2], 1.0, 1e-12);
}

TEST(EmbeddedProbs, ZeroTotalRateThrows) {
  RateSpec spec(2, {{0, 1, WeibullRate{1.0, 2.0}}, {1, 0, ConstantRate{1.0}}});
  EXPECT_THROW(spec.embedded_probs(0, 0.0), ValidationError);
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

TEST(ValidateRates, ConstantRatesPass) {
  auto report = validate_rates(two_state_constant(1.0, 1.0), 10.0);
  EXPECT_TRUE(report.passed());
  ASSERT_EQ(report.checks.size(), 3u);
}

TEST(ValidateRates, ZeroRateFailsPositivity) {
  RateSpec spec(2, {{0, 1, ConstantRate{0.0}}, {1, 0, ConstantRate{1.0}}});
  auto report = validate_rates(spec, 10.0);
  EXPECT_FALSE(report.passed());
  EXPECT_FALSE(report.checks[0].passed);
  EXPECT_EQ(report.checks[0].from, 0u);
  EXPECT_EQ(report.checks[0].to, 1u);
}

TEST(ValidateRates, DecayingSingleExitFailsDivergence) {
  // lambda_12(y) = e^{-y} tabulated finely; Lambda_1(inf) = 1.
  std::vector<double> ages, values;
  for (int k = 0; k <= 400; ++k) {
    ages.push_back(k * 0.05);
    values.push_back(std::exp(-k * 0.05));
  }
  RateSpec spec(2, {{0, 1, TabulatedRate{ages, values}}, {1, 0, ConstantRate{1.0}}});
  auto report = validate_rates(spec, 10.0);
  EXPECT_TRUE(report.checks[0].passed);
  EXPECT_TRUE(report.checks[1].passed);
  EXPECT_FALSE(report.checks[2].passed);
  EXPECT_EQ(report.checks[2].from, 0u);
}

TEST(ValidateRates, BoundViolationIsReported) {
  RateSpec spec(2, {{0, 1, WeibullRate{1.0, 3.0}}, {1, 0, ConstantRate{1.0}}});
  RateValidationOptions opts;
  opts.rate_bound = 100.0;
  auto report = validate_rates(spec, 10.0, opts);
  EXPECT_FALSE(report.checks[1].passed);
  EXPECT_GT(report.checks[1].age, 5.0);
}

TEST(ValidateRates, EmptyStateSetThrows) { EXPECT_THROW(validate_rates(RateSpec(0, {}), 1.0), ValidationError); }

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

TEST(SampleTransition, ExponentialMean) {
  auto spec = two_state_constant(2.0, 1.0);
  RandomStream rng(11);
  std::vector<double> h(100000);
  for (auto& v : h) {
    auto tr = sample_transition(spec, 0, 0.0, rng);
    EXPECT_EQ(tr.next, 1u);
    v = tr.holding;
  }
  auto ms = oracle::mean_se(h);
  EXPECT_LT(std::abs(ms.mean - 0.5), 3.0 * ms.se);
}

TEST(SampleTransition, MemorylessForConstantRates) {
  auto spec = two_state_constant(2.0, 1.0);
  RandomStream a(21), b(22);
  std::vector<double> x(10000), y(10000);
  for (auto& v : x) v = sample_transition(spec, 0, 0.0, a).holding;
  for (auto& v : y) v = sample_transition(spec, 0, 5.0, b).holding;
  double d = oracle::ks_two_sample(x, y);
  EXPECT_GT(oracle::ks_pvalue(d, 5000.0), 0.01);
}

TEST(SampleTransition, KsConstantHazard) {
  auto spec = two_state_constant(2.0, 1.0);
  RandomStream rng(31);
  std::vector<double> x(10000);
  for (auto& v : x) v = sample_transition(spec, 0, 0.0, rng).holding;
  double d = oracle::ks_statistic(x, [](double h) { return 1.0 - std::exp(-2.0 * h); });
  EXPECT_GT(oracle::ks_pvalue(d, 1e4), 0.01);
}

TEST(SampleTransition, KsWeibullHazard) {
  RateSpec spec(2, {{0, 1, WeibullRate{1.0, 3.0}}, {1, 0, ConstantRate{1.0}}});
  RandomStream rng(41);
  std::vector<double> x(10000);
  for (auto& v : x) v = sample_transition(spec, 0, 0.0, rng).holding;
  double d = oracle::ks_statistic(x, [](double h) { return 1.0 - std::exp(-h * h * h); });
  EXPECT_GT(oracle::ks_pvalue(d, 1e4), 0.01);
}

TEST(SampleTransition, KsAgedTabulatedHazard) {
  // Conditional law from age y0 = 0.3 against the closed-form hazard increment.
  TabulatedRate table{{0.0, 0.5, 1.5}, {0.5, 2.0, 1.0}};
  RateSpec spec(2, {{0, 1, table}, {1, 0, ConstantRate{1.0}}});
  auto hazard = [](double y) {
    // integral of the piecewise-linear table, flat beyond 1.5
    if (y <= 0.5) return 0.5 * y + 1.5 * y * y;
    double a = 0.5 * 0.5 + 1.5 * 0.25;
    if (y <= 1.5) {
      double u = y - 0.5;
      return a + 2.0 * u - 0.5 * u * u;
    }
    return a + 2.0 - 0.5 + (y - 1.5);
  };
  const double y0 = 0.3;
  RandomStream rng(51);
  std::vector<double> x(10000);
  for (auto& v : x) v = sample_transition(spec, 0, y0, rng).holding;
  double d = oracle::ks_statistic(x, [&](double h) { return 1.0 - std::exp(-(hazard(y0 + h) - hazard(y0))); });
  EXPECT_GT(oracle::ks_pvalue(d, 1e4), 0.01);
}

TEST(SampleTransition, NextStateFollowsEmbeddedChainAtExitAge) {
  // lambda_12 = 2y, lambda_13 = 1: P(next = 2) = E[p_12(tau)] = E[2 tau / (2 tau + 1)].
  RateSpec spec(3, {{0, 1, WeibullRate{1.0, 2.0}}, {0, 2, ConstantRate{1.0}}, {1, 0, ConstantRate{1.0}}, {2, 0, ConstantRate{1.0}}});
  // Oracle: integral of lambda_12(y) S(y) dy with S(y) = exp(-y^2 - y), by fine Simpson.
  double p12 = 0.0;
  const int m = 20000;
  const double hi = 10.0, h = hi / m;
  for (int k = 0; k <= m; ++k) {
    double y = k * h;
    double w = (k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    p12 += w * 2.0 * y * std::exp(-y * y - y);
  }
  p12 *= h / 3.0;
  RandomStream rng(61);
  const int n = 100000;
  int hits = 0;
  for (int k = 0; k < n; ++k) hits += sample_transition(spec, 0, 0.0, rng).next == 1 ? 1 : 0;
  double phat = static_cast<double>(hits) / n;
  EXPECT_LT(std::abs(phat - p12), 3.0 * std::sqrt(p12 * (1 - p12) / n));
}

TEST(SampleTransition, NoExitGivesInfiniteHolding) {
  RateSpec spec(2, {{1, 0, ConstantRate{1.0}}});
  RandomStream rng(1);
  EXPECT_TRUE(std::isinf(sample_transition(spec, 0, 0.0, rng).holding));
}

// ---------------------------------------------------------------------------
// Paths
// ---------------------------------------------------------------------------

TEST(RegimePath, TinyRatesGiveNoTransitions) {
  auto spec = two_state_constant(1e-9, 1e-9);
  std::size_t transitions = 0;
  for (std::uint64_t p = 0; p < 10000; ++p) {
    RandomStream rng = RandomStream::derived(5, p);
    transitions += simulate_regime_path(spec, 0, 0.0, 1.0, rng).transitions.size();
  }
  EXPECT_EQ(transitions, 0u);
}

TEST(RegimePath, AgeResetsAndGrowsAtUnitSlope) {
  auto spec = two_state_weibull();
  RandomStream rng(77);
  auto path = simulate_regime_path(spec, 0, 0.4, 10.0, rng);
  ASSERT_GT(path.transitions.size(), 3u);
  for (double t = 0.0; t <= 10.0; t += 0.01) {
    auto st = path.state_at(t);
    double last = -0.4;
    std::size_t x = 0;
    for (const auto& tr : path.transitions) {
      if (tr.time > t) break;
      last = tr.time;
      x = tr.to;
    }
    EXPECT_EQ(st.x, x);
    EXPECT_DOUBLE_EQ(st.y, t - last);
  }
  for (const auto& tr : path.transitions) {
    EXPECT_EQ(path.state_at(tr.time).y, 0.0);
    EXPECT_NE(tr.from, tr.to);
  }
}

TEST(RegimePath, OccupationMatchesStationaryDistribution) {
  // lambda_12 = 1, lambda_21 = 2: stationary law (2/3, 1/3).
  auto spec = two_state_constant(1.0, 2.0);
  const double horizon = 1000.0;
  std::vector<double> frac;
  for (std::uint64_t p = 0; p < 100; ++p) {
    RandomStream rng = RandomStream::derived(9, p);
    auto path = simulate_regime_path(spec, 0, 0.0, horizon, rng);
    double t = 0.0, occ = 0.0;
    std::size_t x = 0;
    for (const auto& tr : path.transitions) {
      if (x == 0) occ += tr.time - t;
      t = tr.time;
      x = tr.to;
    }
    if (x == 0) occ += horizon - t;
    frac.push_back(occ / horizon);
  }
  auto ms = oracle::mean_se(frac);
  EXPECT_LT(std::abs(ms.mean - 2.0 / 3.0), 3.0 * ms.se);
}

TEST(RegimePath, ConstantRateCountsArePoisson) {
  // Equal total rates in every state: the counting process is Poisson(lambda t).
  const double lam = 1.5, t = 2.0;
  RateSpec spec(3, {{0, 1, ConstantRate{0.5}}, {0, 2, ConstantRate{1.0}}, {1, 0, ConstantRate{1.5}},
                    {2, 0, ConstantRate{0.75}}, {2, 1, ConstantRate{0.75}}});
  std::vector<std::size_t> counts(40, 0);
  for (std::uint64_t p = 0; p < 10000; ++p) {
    RandomStream rng = RandomStream::derived(13, p);
    std::size_t n = simulate_regime_path(spec, 0, 0.0, t, rng).transitions.size();
    ++counts[std::min<std::size_t>(n, counts.size() - 1)];
  }
  EXPECT_GT(oracle::poisson_chi_square_pvalue(counts, lam * t), 0.01);
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

TEST(Generator, Examples) {
  auto spec = two_state_constant(0.7, 1.3);
  EXPECT_NEAR(apply_generator(spec, [](std::size_t, double) { return 3.0; }, 0, 0.8), 0.0, 1e-9);
  auto weib = two_state_weibull();
  for (double y : {0.0, 0.5, 2.0}) {
    double lam = weib.total_rate(0, y);
    EXPECT_NEAR(apply_generator(weib, [](std::size_t, double a) { return a; }, 0, y), 1.0 - lam * y, 1e-8);
  }
  auto indicator = [](std::size_t i, double) { return i == 1 ? 1.0 : 0.0; };
  EXPECT_NEAR(apply_generator(spec, indicator, 0, 0.4), 0.7, 1e-12);
  EXPECT_NEAR(apply_generator(spec, indicator, 1, 0.4), -1.3, 1e-12);
}

TEST(Generator, DynkinMartingaleProperty) {
  // phi(0, y) = exp(-y^2), phi(1, y) = 2 exp(-y), with lambda_12 = 2y, lambda_21 = 1.5.
  auto spec = two_state_weibull();
  auto phi = [](std::size_t i, double y) { return i == 0 ? std::exp(-y * y) : 2.0 * std::exp(-y); };
  auto a_phi = [](std::size_t i, double y) {
    if (i == 0) return -2.0 * y * std::exp(-y * y) + 2.0 * y * (2.0 - std::exp(-y * y));
    return -2.0 * std::exp(-y) + 1.5 * (1.0 - 2.0 * std::exp(-y));
  };
  auto integrate = [&](std::size_t i, double y0, double len) {
    const int m = 64;
    double h = len / m, s = 0.0;
    for (int k = 0; k <= m; ++k) s += ((k == 0 || k == m) ? 1.0 : (k % 2 ? 4.0 : 2.0)) * a_phi(i, y0 + k * h);
    return s * h / 3.0;
  };
  const double horizon = 2.0, y_start = 0.25;
  std::vector<double> m(20000);
  for (std::size_t p = 0; p < m.size(); ++p) {
    RandomStream rng = RandomStream::derived(17, p);
    auto path = simulate_regime_path(spec, 0, y_start, horizon, rng);
    double t = 0.0, y = y_start, integral = 0.0;
    std::size_t x = 0;
    for (const auto& tr : path.transitions) {
      integral += integrate(x, y, tr.time - t);
      t = tr.time;
      x = tr.to;
      y = 0.0;
    }
    integral += integrate(x, y, horizon - t);
    auto end = path.state_at(horizon);
    m[p] = phi(end.x, end.y) - phi(0, y_start) - integral;
  }
  auto ms = oracle::mean_se(m);
  EXPECT_LT(std::abs(ms.mean), 3.0 * ms.se);
}

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "models.hpp"
#include "oracles.hpp"
#include "smjd/pricing_kernel.hpp"

using namespace smjd;

namespace {

double max_rel_error_linear(const PriceSurface& surf) {
  const auto& g = surf.grid();
  double worst = 0.0;
  for (std::size_t l = 0; l < surf.num_layers(); ++l)
    for (std::size_t i = 0; i < g.regimes; ++i)
      for (std::size_t k = 0; k < g.ages; ++k)
        for (std::size_t j = 0; j < g.s.n; ++j)
          worst = std::max(worst, oracle::rel_err(surf.node_price(l, i, k, j), g.s.s(j)));
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------
// beta coefficients
// ---------------------------------------------------------------------------

TEST(Betas, ZeroEta) {
  JumpSpec zero({{0.3, 1.0}, {0.9, 2.0}}, ClampEta{0.0, 0.0, 0.0});
  MarketModel model(RateSpec(1, {}), {0.03}, {0.11}, {ConstantVol{0.3}}, zero, 1.0);
  auto b = compute_betas(model, 0.4, 0);
  EXPECT_EQ(b.beta1, 0.0);
  for (double v : b.beta2) EXPECT_EQ(v, 1.0);
}

TEST(Betas, UniformJumpValue) {
  auto b = compute_betas(models::uniform_jump_single(0.08), 0.0, 0);
  EXPECT_NEAR(b.beta1, (0.03 * 0.375 - 0.04 * 0.375) / 0.415, 1e-15);
  EXPECT_NEAR(b.beta1, -0.0090361445783, 1e-12);
}

TEST(Betas, IdentityAndGammaEqualityOnRandomModels) {
  RandomStream rng(2024);
  for (int draw = 0; draw < 20; ++draw) {
    auto model = models::random_model(rng, 3);
    const auto& jump = model.jump();
    for (int q = 0; q < 10; ++q) {
      double t = rng.uniform();
      for (std::size_t i = 0; i < 3; ++i) {
        auto b = compute_betas(model, t, i);
        auto emm = mmm_coefficients(model, t, i);
        double identity = b.beta1;
        for (std::size_t m = 0; m < jump.size(); ++m) {
          identity += b.beta2[m] * jump.eta_at(m) * jump.weight(m);
          EXPECT_NEAR(b.beta2[m], emm.gamma[m], 1e-12);
        }
        EXPECT_NEAR(identity, 0.0, 1e-12);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Log-normal kernel
// ---------------------------------------------------------------------------

TEST(KernelParams, ConstantCoefficients) {
  auto model = models::benchmark();
  for (std::size_t i = 0; i < 2; ++i) {
    double sg = model.sigma(0.0, i), b1 = beta1_value(model, 0.0, i);
    auto p = kernel_params(model, 90.0, i, 0.2, 0.3);
    EXPECT_NEAR(p.log_mean, std::log(90.0) + (model.r(i) + b1 - 0.5 * sg * sg) * 0.3, 1e-14);
    EXPECT_NEAR(p.log_var, sg * sg * 0.3, 1e-15);
    auto q = kernel_params(model, 90.0 * 1.7, i, 0.2, 0.3);
    EXPECT_NEAR(q.log_mean - p.log_mean, std::log(1.7), 1e-14);
    EXPECT_EQ(q.log_var, p.log_var);
  }
  EXPECT_THROW(kernel_params(model, 90.0, 0, 0.2, 0.0), ValidationError);
}

TEST(KernelParams, TabulatedSigmaPlateaus) {
  // sigma = 0.2 up to 0.5, 0.4 from 0.5 on (a step of width 1e-9 joins the plateaus).
  std::vector<VolFunction> vols{TabulatedVol{{0.0, 0.5, 0.5 + 1e-9, 1.0}, {0.2, 0.2, 0.4, 0.4}}};
  MarketModel model(RateSpec(1, {}), {0.05}, {0.05}, vols, JumpSpec::none(), 1.0);
  auto p = kernel_params(model, 100.0, 0, 0.25, 0.5);
  EXPECT_NEAR(p.log_var, 0.25 * 0.04 + 0.25 * 0.16, 1e-9);
  EXPECT_NEAR(p.log_mean, std::log(100.0) + 0.05 * 0.5 - 0.5 * p.log_var, 1e-9);
}

TEST(LognormalExpect, Normalization) {
  KernelParams p{std::log(100.0), 0.04};
  EXPECT_NEAR(lognormal_expect([](double) { return 1.0; }, p), 1.0, 1e-12);
  EXPECT_NEAR(lognormal_expect([](double x) { return x; }, p), std::exp(p.log_mean + 0.5 * p.log_var), 1e-10 * 100.0);
}

TEST(LognormalExpect, CallClosedForm) {
  const double strike[] = {100.0};
  for (double m : {std::log(80.0), std::log(100.0), std::log(100.0) + 0.05, std::log(150.0)}) {
    for (double v : {1e-4, 0.04, 0.25}) {
      KernelParams p{m, v};
      double got = lognormal_expect([](double x) { return std::max(x - 100.0, 0.0); }, p, strike, 64);
      EXPECT_NEAR(got, oracle::lognormal_call(m, v, 100.0), 1e-8) << "m=" << m << " v=" << v;
    }
  }
}

// ---------------------------------------------------------------------------
// Evolution operator
// ---------------------------------------------------------------------------

TEST(Evolution, ConservesConstants) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.time_steps = 50;
  spec.s_nodes = 201;
  auto surf = evolution_apply(model, [](double, std::size_t, double) { return 1.0; }, 1.0, spec);
  for (std::size_t l = 0; l < surf.num_layers(); ++l)
    for (double v : surf.price_layer(l)) ASSERT_NEAR(v, 1.0, 1e-8);
  EXPECT_LT(surf.diagnostics().conservativity_error, 1e-8);
}

TEST(Evolution, LinearGrowthWithSharedDrift) {
  // r + beta1 equal in both regimes: mu chosen so that beta1 compensates r.
  auto jump = models::uniform_clamp_jump();
  const double eta = 0.375;
  auto mu_for = [&](double r, double sigma, double target) {
    // beta1 = [(mu - r) eta2 - s2 eta] / (s2 + eta2) = target - r
    double s2 = sigma * sigma;
    return r + ((target - r) * (s2 + eta) + s2 * eta) / eta;
  };
  const double target = 0.04;
  MarketModel model(models::benchmark_rates(), {0.05, 0.02}, {mu_for(0.05, 0.2, target), mu_for(0.02, 0.3, target)},
                    {ConstantVol{0.2}, ConstantVol{0.3}}, jump, 1.0);
  ASSERT_NEAR(model.r(1) + beta1_value(model, 0.0, 1), target, 1e-14);
  GridSpec spec;
  spec.time_steps = 50;
  spec.s_nodes = 201;
  auto surf = evolution_apply(model, [](double s, std::size_t, double) { return s; }, 1.0, spec);
  const auto& g = surf.grid();
  for (std::size_t n = 0; n <= g.steps; n += 10)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < g.ages; k += 7)
        for (std::size_t j = 0; j < g.s.n; j += 5) {
          double want = g.s.s(j) * std::exp(target * (1.0 - g.t(n)));
          EXPECT_LT(oracle::rel_err(surf.node_price(n, i, k, j), want), 1e-6);
        }
}

TEST(Evolution, MatchesMonteCarloForSwitchingDiffusion) {
  // Constant switching rates, psi(s, i) = (s - 100)^+ (1 + i). The oracle
  // simulates S-hat directly: exponential holding, lognormal stretches.
  RateSpec rates(2, {{0, 1, ConstantRate{0.8}}, {1, 0, ConstantRate{1.2}}});
  MarketModel model(rates, {0.05, 0.03}, {0.07, 0.05}, {ConstantVol{0.2}, ConstantVol{0.3}}, models::uniform_clamp_jump(), 1.0);
  auto psi = [](double s, std::size_t i, double) { return std::max(s - 100.0, 0.0) * (1.0 + static_cast<double>(i)); };
  GridSpec spec;
  auto surf = evolution_apply(model, psi, 1.0, spec);
  const double lam[] = {0.8, 1.2};
  double drift[2], vol[2];
  for (std::size_t i = 0; i < 2; ++i) {
    vol[i] = model.sigma(0.0, i);
    drift[i] = model.r(i) + beta1_value(model, 0.0, i) - 0.5 * vol[i] * vol[i];
  }
  std::vector<double> x(100000);
  for (std::size_t p = 0; p < x.size(); ++p) {
    RandomStream rng = RandomStream::derived(99, p);
    double t = 0.0, ls = std::log(100.0);
    std::size_t i = 0;
    while (true) {
      double h = rng.exponential() / lam[i];
      double step = std::min(h, 1.0 - t);
      ls += drift[i] * step + vol[i] * std::sqrt(step) * rng.normal();
      t += step;
      if (t >= 1.0) break;
      i = 1 - i;
    }
    x[p] = psi(std::exp(ls), i, 0.0);
  }
  auto ms = oracle::mean_se(x);
  EXPECT_LT(std::abs(surf.price_at(0.0, 100.0, 0, 0.0) - ms.mean), 3.0 * ms.se);
}

TEST(Evolution, LinearGrowthBoundOnRandomFunctions) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.time_steps = 20;
  spec.s_nodes = 101;
  auto g = make_surface_grid(model, spec);
  EvolutionOperator op(model, g);
  double sup_rb = -kInf;
  for (std::size_t i = 0; i < 2; ++i) sup_rb = std::max(sup_rb, model.r(i) + beta1_value(model, 0.0, i));
  RandomStream rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto psi = sample_layer(g, [&](double s, std::size_t, double) { return (1.0 + s) * (2.0 * rng.uniform() - 1.0); });
    std::vector<double> out(psi.size());
    op.apply(static_cast<std::size_t>(trial % 20), psi, out);
    EXPECT_LE(v_norm(g, out), v_norm(g, psi) * (1.0 + std::exp(model.horizon() * sup_rb)));
  }
}

// ---------------------------------------------------------------------------
// Jump operator and hedge ratio
// ---------------------------------------------------------------------------

TEST(JumpOperator, Examples) {
  auto model = models::benchmark();
  GridSpec spec;
  auto g = make_surface_grid(model, spec);
  auto flat = jump_operator(model, g, 0.3, sample_layer(g, [](double, std::size_t, double) { return 4.2; }));
  for (double v : flat) EXPECT_NEAR(v, 0.0, 1e-12);
  auto lin = jump_operator(model, g, 0.3, sample_layer(g, [](double s, std::size_t, double) { return s; }));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < g.s.n; ++j) {
      double s = g.s.s(j);
      // exact up to linear-in-ln-s interpolation of the identity, O(dx^2)
      EXPECT_NEAR(lin[g.row_offset(i, 3) + j] / s, -beta1_value(model, 0.3, i), 1e-4);
    }
  JumpSpec zero({{0.3, 1.0}}, ClampEta{0.0, 0.0, 0.0});
  MarketModel no_eta(RateSpec(1, {}), {0.03}, {0.11}, {ConstantVol{0.3}}, zero, 1.0);
  auto g0 = make_surface_grid(no_eta, spec);
  auto out = jump_operator(no_eta, g0, 0.0, sample_layer(g0, [](double s, std::size_t, double) { return s * s; }));
  for (double v : out) EXPECT_EQ(v, 0.0);
}

TEST(JumpOperator, NormBoundOnRandomFunctions) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.s_nodes = 151;
  auto g = make_surface_grid(model, spec);
  JumpStencils st(model, g);
  const double bound = std::max(st.norm_bound(0.0, 0), st.norm_bound(0.0, 1));
  RandomStream rng(8);
  // Rough random grid functions: the bound is checked at nodes whose jump
  // targets stay inside the grid (linear extrapolation of noise is unbounded).
  const double lo = g.s.s_min() / (1.0 + model.jump().min_eta());
  const double hi = g.s.s_max() / (1.0 + model.jump().max_eta());
  auto inner_norm = [&](const std::vector<double>& layer) {
    double worst = 0.0;
    for (std::size_t i = 0; i < g.regimes; ++i)
      for (std::size_t k = 0; k < g.ages; ++k)
        for (std::size_t j = 0; j < g.s.n; ++j)
          if (g.s.s(j) >= lo && g.s.s(j) <= hi)
            worst = std::max(worst, std::abs(layer[g.row_offset(i, k) + j]) / (1.0 + g.s.s(j)));
    return worst;
  };
  for (int trial = 0; trial < 100; ++trial) {
    auto psi = sample_layer(g, [&](double s, std::size_t, double) { return (1.0 + s) * (2.0 * rng.uniform() - 1.0); });
    auto out = jump_operator(model, g, 0.0, psi);
    EXPECT_LE(inner_norm(out), bound * v_norm(g, psi));
  }
  // Random Lipschitz functions a + b s + c (s - K)^+: bound on the whole grid.
  for (int trial = 0; trial < 100; ++trial) {
    double a = 2.0 * rng.uniform() - 1.0, b = 2.0 * rng.uniform() - 1.0, c = 2.0 * rng.uniform() - 1.0;
    double k = 50.0 + 100.0 * rng.uniform();
    auto psi = sample_layer(g, [&](double s, std::size_t, double) { return a + b * s + c * std::max(s - k, 0.0); });
    auto out = jump_operator(model, g, 0.0, psi);
    EXPECT_LE(v_norm(g, out), bound * v_norm(g, psi));
  }
}

TEST(HedgeRatio, ZeroEtaIsPriceSlope) {
  auto model = models::black_scholes();
  GridSpec spec;
  auto surf = solve_price(model, PayoffSpec::call(100.0), spec);
  const auto& g = surf.grid();
  for (std::size_t j = 1; j + 1 < g.s.n; j += 3) {
    double slope = (surf.node_price(0, 0, 0, j + 1) - surf.node_price(0, 0, 0, j - 1)) / (g.s.s(j + 1) - g.s.s(j - 1));
    EXPECT_NEAR(surf.node_xi(0, 0, 0, j), slope, 1e-12);
  }
  EXPECT_NEAR(hedge_ratio(model, surf, 0.0, 100.0, 0, 0.0), oracle::bs_delta(100.0, 100.0, 0.05, 0.2, 1.0), 2e-3);
  EXPECT_THROW(hedge_ratio(model, surf, 0.0, 1e6, 0, 0.0), ValidationError);
}

TEST(HedgeRatio, LinearPayoffGivesUnitHedge) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.time_steps = 50;
  auto surf = solve_price(model, PayoffSpec::linear(), spec);
  const auto& g = surf.grid();
  for (std::size_t l = 0; l < surf.num_layers(); l += 10)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < g.s.n; j += 10) EXPECT_NEAR(surf.node_xi(l, i, 0, j), 1.0, 1e-3);
  EXPECT_NEAR(hedge_ratio(model, surf, 0.5, 100.0, 1, 0.2), 1.0, 1e-3);
}

TEST(HedgeRatio, BoundedByTwiceMaxSlope) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.time_steps = 50;
  auto surf = solve_price(model, PayoffSpec::call(100.0), spec);
  EXPECT_LT(max_abs_xi(surf), 2.0 * max_price_slope(surf));
}

// ---------------------------------------------------------------------------
// Price surface
// ---------------------------------------------------------------------------

TEST(SolvePrice, BlackScholesDegeneration) {
  auto model = models::black_scholes();
  GridSpec spec;
  for (double k : {80.0, 90.0, 100.0, 110.0, 120.0}) {
    auto surf = solve_price(model, PayoffSpec::call(k), spec);
    EXPECT_LT(oracle::rel_err(surf.price_at(0.0, 100.0, 0, 0.0), oracle::bs_call(100.0, k, 0.05, 0.2, 1.0)), 5e-3);
    const auto& g = surf.grid();
    const std::size_t last = surf.num_layers() - 1;
    for (std::size_t j = 0; j < g.s.n; ++j) ASSERT_EQ(surf.node_price(last, 0, 0, j), std::max(g.s.s(j) - k, 0.0));
  }
}

TEST(SolvePrice, TimeDependentVolatility) {
  std::vector<VolFunction> vols{TabulatedVol{{0.0, 0.4, 0.6, 1.0}, {0.15, 0.15, 0.3, 0.3}}};
  MarketModel model(RateSpec(1, {}), {0.04}, {0.04}, vols, JumpSpec::none(), 1.0);
  double var = 0.4 * 0.0225 + (0.027 - 0.003375) / 2.25 + 0.4 * 0.09;
  auto surf = solve_price(model, PayoffSpec::call(100.0), GridSpec{});
  EXPECT_LT(oracle::rel_err(surf.price_at(0.0, 100.0, 0, 0.0), oracle::bs_call(100.0, 100.0, 0.04, std::sqrt(var), 1.0)), 2e-3);
}

TEST(SolvePrice, LinearPayoffIsExact) {
  GridSpec spec;
  auto surf = solve_price(models::benchmark(), PayoffSpec::linear(), spec);
  EXPECT_LT(max_rel_error_linear(surf), 1e-3);
}

TEST(SolvePrice, ConstantPayoffDiscounts) {
  MarketModel model(models::benchmark_rates(), {0.04, 0.04}, {0.07, 0.05}, {ConstantVol{0.2}, ConstantVol{0.3}},
                    models::uniform_clamp_jump(), 1.0);
  auto surf = solve_price(model, PayoffSpec::constant(), GridSpec{});
  const auto& g = surf.grid();
  for (std::size_t l = 0; l < surf.num_layers(); ++l) {
    double want = std::exp(-0.04 * (1.0 - g.t(surf.layer_steps()[l])));
    for (double v : surf.price_layer(l)) ASSERT_NEAR(v, want, 1e-6);
  }
}

TEST(SolvePrice, IdenticalRegimesReduceToOneRegime) {
  // Same coefficients in both regimes: the switching machinery must be invisible.
  MarketModel two(models::benchmark_rates(), {0.05, 0.05}, {0.07, 0.07}, {ConstantVol{0.25}, ConstantVol{0.25}},
                  models::uniform_clamp_jump(), 1.0);
  MarketModel one(RateSpec(1, {}), {0.05}, {0.07}, {ConstantVol{0.25}}, models::uniform_clamp_jump(), 1.0);
  GridSpec spec;
  spec.time_steps = 50;
  auto a = solve_price(two, PayoffSpec::call(100.0), spec);
  auto b = solve_price(one, PayoffSpec::call(100.0), spec);
  for (double s : {70.0, 100.0, 140.0})
    for (double y : {0.0, 0.3, 0.9}) EXPECT_NEAR(a.price_at(0.0, s, 0, y), b.price_at(0.0, s, 0, 0.0), 1e-6);
}

TEST(SolvePrice, ParityFromLinearity) {
  auto model = models::benchmark();
  GridSpec spec;
  spec.time_steps = 40;
  spec.keep_all_layers = false;
  double call = solve_price(model, PayoffSpec::call(95.0), spec).price_at(0.0, 100.0, 0, 0.0);
  double put = solve_price(model, PayoffSpec::put(95.0), spec).price_at(0.0, 100.0, 0, 0.0);
  double lin = solve_price(model, PayoffSpec::linear(), spec).price_at(0.0, 100.0, 0, 0.0);
  double bond = solve_price(model, PayoffSpec::constant(), spec).price_at(0.0, 100.0, 0, 0.0);
  // Monotone slope limiting makes the expectation step mildly nonlinear, so
  // parity holds to discretization accuracy rather than to rounding.
  EXPECT_NEAR(call - put, lin - 95.0 * bond, 1e-4);
}

TEST(SolvePrice, MonotoneInPriceForNondecreasingPayoff) {
  GridSpec spec;
  spec.time_steps = 50;
  auto surf = solve_price(models::benchmark(), PayoffSpec::call(100.0), spec);
  const auto& g = surf.grid();
  for (std::size_t l = 0; l < surf.num_layers(); ++l)
    for (std::size_t i = 0; i < g.regimes; ++i)
      for (std::size_t k = 0; k < g.ages; ++k)
        for (std::size_t j = 1; j < g.s.n; ++j)
          ASSERT_GE(surf.node_price(l, i, k, j) + 1e-10, surf.node_price(l, i, k, j - 1));
}

TEST(SolvePrice, GrowthEnvelopeHolds) {
  auto surf = solve_price(models::benchmark(), PayoffSpec::butterfly(80.0, 100.0, 130.0), GridSpec{});
  const auto& d = surf.diagnostics();
  for (std::size_t l = 0; l < surf.num_layers(); ++l) EXPECT_LE(v_norm(surf.grid(), surf.price_layer(l)), d.growth_bound);
  EXPECT_LE(d.max_growth_ratio, d.growth_envelope);
  EXPECT_TRUE(d.a2_passed);
}

TEST(SolvePrice, WarnsWhenNoArbitrageFails) {
  auto surf = solve_price(models::uniform_jump_single(0.15), PayoffSpec::call(100.0), GridSpec{20, 101});
  EXPECT_FALSE(surf.diagnostics().a2_passed);
  EXPECT_FALSE(surf.diagnostics().warnings.empty());
}

TEST(SolvePrice, RichardsonRatioOnBlackScholes) {
  auto model = models::black_scholes();
  GridSpec g0;
  g0.time_steps = 50;
  g0.s_nodes = 151;
  g0.keep_all_layers = false;
  auto price = [&](const GridSpec& g) { return solve_price(model, PayoffSpec::call(100.0), g).price_at(0.0, 100.0, 0, 0.0); };
  double p0 = price(g0), p1 = price(g0.refined()), p2 = price(g0.refined().refined());
  double ratio = (p0 - p1) / (p1 - p2);
  EXPECT_GE(ratio, 1.7);
  EXPECT_LE(ratio, 4.3);
}

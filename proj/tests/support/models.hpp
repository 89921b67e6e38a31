// Model configurations shared by the unit tests and the acceptance runner.
#pragma once

#include <vector>

#include "smjd/market_model.hpp"

namespace models {

using namespace smjd;

/// nu = Lebesgue on [-1/2, 1], eta(z) = clamp(z, -1/2, 1), Simpson-discretized.
inline JumpSpec uniform_clamp_jump(int intervals = 200) {
  return JumpSpec::from_density([](double) { return 1.0; }, -0.5, 1.0, intervals, ClampEta{1.0, -0.5, 1.0});
}

/// Single regime, no jumps.
inline MarketModel black_scholes(double r = 0.05, double mu = 0.05, double sigma = 0.2, double horizon = 1.0) {
  return MarketModel(RateSpec(1, {}), {r}, {mu}, {ConstantVol{sigma}}, JumpSpec::none(), horizon);
}

/// Single regime with the uniform clamp jump measure.
inline MarketModel uniform_jump_single(double mu, double r = 0.05, double sigma = 0.2, double horizon = 1.0) {
  return MarketModel(RateSpec(1, {}), {r}, {mu}, {ConstantVol{sigma}}, uniform_clamp_jump(), horizon);
}

/// Two regimes with an age-dependent exit from regime 1 and the uniform clamp jumps.
inline RateSpec benchmark_rates() {
  return RateSpec(2, {{0, 1, TabulatedRate{{0.0, 0.5}, {0.5, 2.0}}}, {1, 0, ConstantRate{1.0}}});
}

inline MarketModel benchmark(double horizon = 1.0) {
  return MarketModel(benchmark_rates(), {0.05, 0.03}, {0.07, 0.05}, {ConstantVol{0.2}, ConstantVol{0.3}},
                     uniform_clamp_jump(), horizon);
}

/// Constant rates, tabulated volatilities and a random atomic clamp jump measure.
inline MarketModel random_model(RandomStream& rng, std::size_t regimes) {
  std::vector<RateEntry> entries;
  for (std::size_t i = 0; i < regimes; ++i)
    for (std::size_t j = 0; j < regimes; ++j)
      if (i != j) entries.push_back({i, j, ConstantRate{0.2 + rng.uniform()}});
  std::vector<double> r, mu;
  std::vector<VolFunction> vol;
  for (std::size_t i = 0; i < regimes; ++i) {
    r.push_back(0.1 * rng.uniform());
    mu.push_back(0.2 * rng.uniform() - 0.05);
    vol.push_back(TabulatedVol{{0.0, 0.5, 1.0}, {0.1 + 0.4 * rng.uniform(), 0.1 + 0.4 * rng.uniform(), 0.1 + 0.4 * rng.uniform()}});
  }
  std::vector<JumpNode> nodes;
  for (int m = 0; m < 7; ++m) nodes.push_back({2.0 * rng.uniform() - 1.0, 0.1 + rng.uniform()});
  JumpSpec jump(nodes, ClampEta{0.5 + rng.uniform(), -0.6, 0.8});
  return MarketModel(RateSpec(regimes, entries), r, mu, vol, jump, 1.0);
}

}  // namespace models

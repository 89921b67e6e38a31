// JSON configuration parsing and CSV/JSON artifact writers. Regime labels are
// 1-based in every external format and zero-based inside the library.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "smjd/core.hpp"
#include "smjd/market_model.hpp"
#include "smjd/mc_engine.hpp"
#include "smjd/payoff.hpp"
#include "smjd/pricing_kernel.hpp"
#include "smjd/semi_markov.hpp"

namespace smjd::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Reading
// ---------------------------------------------------------------------------

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open file '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + origin + ": " + e.what());
  }
}

inline json read_json(const std::filesystem::path& path) { return parse_json(read_text(path), "'" + path.string() + "'"); }

namespace detail {

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(where + ": missing field '" + key + "'");
  return j.at(key);
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  const json& v = field(j, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + ": field '" + key + "' has the wrong type");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return get<T>(j, key, where);
}

inline std::size_t state_index(long label, std::size_t states, const std::string& where) {
  if (label < 1 || static_cast<std::size_t>(label) > states)
    throw ValidationError(where + ": state " + std::to_string(label) + " is outside 1.." + std::to_string(states));
  return static_cast<std::size_t>(label - 1);
}

}  // namespace detail

/// {"states": k, "rates": [{"from": i, "to": j, "family": ..., "params": {...}}]}
inline RateSpec parse_rate_spec(const json& j) {
  const std::string where = "regimes";
  auto states = detail::get<long>(j, "states", where);
  if (states < 1) throw ValidationError("regimes: empty state set");
  std::vector<RateEntry> entries;
  if (j.contains("rates")) {
    const json& rates = j.at("rates");
    if (!rates.is_array()) throw ConfigError("regimes: 'rates' must be an array");
    for (const auto& e : rates) {
      std::string w = "regimes.rates";
      auto from = detail::state_index(detail::get<long>(e, "from", w), static_cast<std::size_t>(states), w);
      auto to = detail::state_index(detail::get<long>(e, "to", w), static_cast<std::size_t>(states), w);
      auto family = detail::get<std::string>(e, "family", w);
      const json& p = detail::field(e, "params", w);
      RateFunction fn;
      if (family == "constant") {
        fn = ConstantRate{detail::get<double>(p, "value", w)};
      } else if (family == "weibull") {
        fn = WeibullRate{detail::get<double>(p, "scale", w), detail::get<double>(p, "shape", w)};
      } else if (family == "table") {
        fn = TabulatedRate{detail::get<std::vector<double>>(p, "ages", w), detail::get<std::vector<double>>(p, "values", w)};
      } else {
        throw ConfigError(w + ": unknown rate family '" + family + "'");
      }
      entries.push_back({from, to, std::move(fn)});
    }
  }
  return RateSpec(static_cast<std::size_t>(states), std::move(entries));
}

inline EtaFunction parse_eta(const json& j) {
  const std::string w = "jump.eta";
  auto kind = detail::get<std::string>(j, "kind", w);
  if (kind == "clamp")
    return ClampEta{detail::get_or<double>(j, "slope", 1.0, w), detail::get<double>(j, "lo", w), detail::get<double>(j, "hi", w)};
  if (kind == "table")
    return TabulatedEta{detail::get<std::vector<double>>(j, "z", w), detail::get<std::vector<double>>(j, "values", w)};
  throw ConfigError(w + ": unknown eta kind '" + kind + "'");
}

/// {"nodes": [[z, w], ...], "eta": {...}} or
/// {"density": {"kind": "uniform"|"normal", ...}, "interval": [a, b], "n": M, "eta": {...}}
inline JumpSpec parse_jump(const json& j) {
  const std::string w = "jump";
  if (j.is_null()) return JumpSpec::none();
  EtaFunction eta = parse_eta(detail::field(j, "eta", w));
  if (j.contains("nodes")) {
    std::vector<JumpNode> nodes;
    for (const auto& n : j.at("nodes")) {
      if (!n.is_array() || n.size() != 2) throw ConfigError(w + ": nodes must be [z, weight] pairs");
      nodes.push_back({n[0].get<double>(), n[1].get<double>()});
    }
    return JumpSpec(std::move(nodes), eta);
  }
  const json& d = detail::field(j, "density", w);
  auto interval = detail::get<std::vector<double>>(j, "interval", w);
  if (interval.size() != 2) throw ConfigError(w + ": interval must be [a, b]");
  int n = detail::get_or<int>(j, "n", 200, w);
  auto kind = detail::get<std::string>(d, "kind", w + ".density");
  if (kind == "uniform") {
    double h = detail::get_or<double>(d, "height", 1.0, w);
    return JumpSpec::from_density([h](double) { return h; }, interval[0], interval[1], n, eta);
  }
  if (kind == "normal") {
    double mean = detail::get<double>(d, "mean", w);
    double sd = detail::get<double>(d, "sd", w);
    double mass = detail::get_or<double>(d, "mass", 1.0, w);
    require(sd > 0.0, "jump density sd must be positive");
    return JumpSpec::from_density(
        [=](double z) { return mass * std::exp(-0.5 * (z - mean) * (z - mean) / (sd * sd)) / (sd * std::sqrt(2.0 * std::numbers::pi)); },
        interval[0], interval[1], n, eta);
  }
  throw ConfigError(w + ": unknown density kind '" + kind + "'");
}

/// {"kind": "constant", "values": [...]} or {"kind": "table", "times": [...], "values": [[...], ...]}
inline std::vector<VolFunction> parse_sigma(const json& j, std::size_t regimes) {
  const std::string w = "sigma";
  auto kind = detail::get<std::string>(j, "kind", w);
  std::vector<VolFunction> out;
  if (kind == "constant") {
    auto v = detail::get<std::vector<double>>(j, "values", w);
    for (double s : v) out.push_back(ConstantVol{s});
  } else if (kind == "table") {
    auto times = detail::get<std::vector<double>>(j, "times", w);
    auto values = detail::get<std::vector<std::vector<double>>>(j, "values", w);
    for (auto& row : values) out.push_back(TabulatedVol{times, row});
  } else {
    throw ConfigError(w + ": unknown sigma kind '" + kind + "'");
  }
  if (out.size() != regimes) throw ValidationError("sigma: need one entry per regime");
  return out;
}

inline MarketModel parse_model(const json& j) {
  const std::string w = "model";
  RateSpec rates = parse_rate_spec(detail::field(j, "regimes", w));
  auto r = detail::get<std::vector<double>>(j, "r", w);
  auto mu = detail::get<std::vector<double>>(j, "mu", w);
  auto sigma = parse_sigma(detail::field(j, "sigma", w), rates.num_states());
  JumpSpec jump = j.contains("jump") ? parse_jump(j.at("jump")) : JumpSpec::none();
  double horizon = detail::get<double>(j, "T", w);
  int simpson = detail::get_or<int>(j, "simpson_intervals", 4, w);
  return MarketModel(std::move(rates), std::move(r), std::move(mu), std::move(sigma), std::move(jump), horizon, simpson);
}

inline PayoffSpec parse_payoff(const json& j) {
  const std::string w = "payoff";
  auto kind = detail::get<std::string>(j, "kind", w);
  PayoffSpec p;
  if (kind == "call") p = PayoffSpec::call(detail::get<double>(j, "K1", w));
  else if (kind == "put") p = PayoffSpec::put(detail::get<double>(j, "K1", w));
  else if (kind == "butterfly")
    p = PayoffSpec::butterfly(detail::get<double>(j, "K1", w), detail::get<double>(j, "K2", w), detail::get<double>(j, "K3", w));
  else if (kind == "linear") p = PayoffSpec::linear();
  else if (kind == "constant") p = PayoffSpec::constant(detail::get_or<double>(j, "level", 1.0, w));
  else if (kind == "table")
    p = PayoffSpec::tabulated(detail::get<std::vector<double>>(j, "s", w), detail::get<std::vector<double>>(j, "values", w));
  else throw ConfigError(w + ": unknown payoff kind '" + kind + "'");
  p.validate();
  return p;
}

inline GridSpec parse_grid(const json& j, double s_ref) {
  const std::string w = "grid";
  GridSpec g;
  g.s_ref = s_ref;
  if (j.is_null()) return g;
  g.time_steps = detail::get_or<std::size_t>(j, "time_steps", g.time_steps, w);
  g.s_nodes = detail::get_or<std::size_t>(j, "s_nodes", g.s_nodes, w);
  g.s_ref = detail::get_or<double>(j, "s_ref", s_ref, w);
  g.width_sd = detail::get_or<double>(j, "width_sd", g.width_sd, w);
  g.gh_order = detail::get_or<int>(j, "gh_order", g.gh_order, w);
  auto rule = detail::get_or<std::string>(j, "expectation", "exact", w);
  if (rule == "exact") g.rule = ExpectationRule::exact_cells;
  else if (rule == "gauss_hermite") g.rule = ExpectationRule::gauss_hermite;
  else throw ConfigError(w + ": unknown expectation rule '" + rule + "'");
  require(g.time_steps >= 1 && g.s_nodes >= 5 && g.width_sd > 0.0, "grid parameters must be positive");
  return g;
}

// ---------------------------------------------------------------------------
// Writing
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form, so reruns are byte-identical.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write file '" + path.string() + "'");
  out << text;
  if (!out) throw ConfigError("failed writing file '" + path.string() + "'");
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Columns: path, t, S, X, Y, event, z.
inline std::string paths_csv(const std::vector<PathRecord>& paths) {
  std::ostringstream os;
  os << "path,t,S,X,Y,event,z\n";
  for (std::size_t p = 0; p < paths.size(); ++p)
    for (const auto& pt : paths[p].points)
      os << p << ',' << num(pt.t) << ',' << num(pt.s) << ',' << pt.regime + 1 << ',' << num(pt.age) << ','
         << to_string(pt.event) << ',' << (std::isnan(pt.z) ? std::string() : num(pt.z)) << '\n';
  return os.str();
}

/// Columns: t, s, regime, y, price, xi. Only the listed stored layers are written.
inline std::string surface_csv(const PriceSurface& surface, const std::vector<std::size_t>& layers) {
  const auto& g = surface.grid();
  std::ostringstream os;
  os << "t,s,regime,y,price,xi\n";
  for (std::size_t l : layers) {
    double t = g.t(surface.layer_steps().at(l));
    for (std::size_t i = 0; i < g.regimes; ++i)
      for (std::size_t k = 0; k < g.ages; ++k)
        for (std::size_t j = 0; j < g.s.n; ++j)
          os << num(t) << ',' << num(g.s.s(j)) << ',' << i + 1 << ',' << num(g.y(k)) << ','
             << num(surface.node_price(l, i, k, j)) << ',' << num(surface.node_xi(l, i, k, j)) << '\n';
  }
  return os.str();
}

inline json to_json(const McEstimate& e) {
  return json{{"value", e.value},     {"std_error", e.std_error}, {"ci_low", e.ci_low}, {"ci_high", e.ci_high},
              {"level", e.level},     {"n_paths", e.n_paths},     {"seed", e.seed}};
}

inline json to_json(const BacktestReport& r) {
  return json{{"n_paths", r.n_paths},
              {"rebalance_steps", r.rebalance_steps},
              {"seed", r.seed},
              {"initial_value", r.initial_value},
              {"mean_residual", r.mean_residual},
              {"residual_std_error", r.residual_std_error},
              {"residual_variance", r.residual_variance},
              {"unhedged_variance", r.unhedged_variance},
              {"std_ratio", r.std_ratio},
              {"correlation", r.correlation},
              {"correlation_std_error", r.correlation_std_error},
              {"coverage_misses", r.coverage_misses},
              {"warnings", r.warnings}};
}

inline json to_json(const SolveDiagnostics& d) {
  return json{{"method", d.method},
              {"conservativity_error", d.conservativity_error},
              {"max_growth_ratio", d.max_growth_ratio},
              {"growth_envelope", d.growth_envelope},
              {"v_norm_terminal", d.v_norm_terminal},
              {"v_norm_initial", d.v_norm_initial},
              {"growth_bound", d.growth_bound},
              {"a2_passed", d.a2_passed},
              {"warnings", d.warnings}};
}

/// 64-bit FNV-1a hash, hex encoded.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace smjd::io

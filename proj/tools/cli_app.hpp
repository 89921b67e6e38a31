// Batch front end: config ingestion, subcommand dispatch, artifacts, manifests.
#pragma once

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smjd/smjd.hpp"

namespace smjd::cli {

namespace fs = std::filesystem;
using io::json;

enum ExitCode : int { ok = 0, validation_failure = 1, numerical_failure = 2, config_failure = 3 };

struct Options {
  std::string subcommand;
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  unsigned threads = 0;
};

/// Everything a subcommand needs, resolved from the config file.
struct RunConfig {
  json raw;
  std::optional<std::string> method_override;
  std::string raw_text;
  fs::path config_dir;
  std::uint64_t seed = 1;
  double s0 = 100.0;
  std::size_t x0 = 0;
  double y0 = 0.0;

  const json& section(const char* key) const {
    static const json empty = json::object();
    return raw.contains(key) ? raw.at(key) : empty;
  }

  MarketModel model() const {
    if (!raw.contains("model")) throw ConfigError("config: missing field 'model'");
    const json& m = raw.at("model");
    if (m.is_string()) {
      fs::path p = m.get<std::string>();
      if (p.is_relative()) p = config_dir / p;
      if (!fs::exists(p)) throw ConfigError("model file not found: '" + p.string() + "'");
      return io::parse_model(io::read_json(p));
    }
    return io::parse_model(m);
  }

  PayoffSpec payoff() const {
    if (!raw.contains("payoff")) throw ConfigError("config: missing field 'payoff'");
    return io::parse_payoff(raw.at("payoff"));
  }

  GridSpec grid() const {
    GridSpec g = io::parse_grid(raw.contains("grid") ? raw.at("grid") : json(nullptr), s0);
    g.y0 = std::max(g.y0, y0);
    return g;
  }

  std::string method() const {
    std::string m = method_override ? *method_override : raw.value("method", std::string("ie"));
    if (m != "ie" && m != "fd" && m != "mc-q" && m != "mc-p") throw ConfigError("config: unknown method '" + m + "'");
    return m;
  }

  template <class T>
  T value(const char* sec, const char* key, T fallback) const {
    const json& s = section(sec);
    if (!s.contains(key)) return fallback;
    try {
      return s.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("config: field '") + sec + "." + key + "' has the wrong type");
    }
  }
};

inline RunConfig load_config(const Options& opts) {
  RunConfig cfg;
  fs::path path = opts.config_path;
  if (!fs::exists(path)) throw ConfigError("config file not found: '" + path.string() + "'");
  cfg.raw_text = io::read_text(path);
  cfg.raw = io::parse_json(cfg.raw_text, "'" + path.string() + "'");
  if (!cfg.raw.is_object()) throw ConfigError("config: top level must be a JSON object");
  cfg.config_dir = path.parent_path();
  cfg.method_override = opts.method;
  cfg.seed = opts.seed ? *opts.seed : cfg.raw.value("seed", std::uint64_t{1});
  cfg.s0 = cfg.value<double>("initial", "s0", 100.0);
  long x0 = cfg.value<long>("initial", "x0", 1);
  if (x0 < 1) throw ValidationError("initial.x0 must be a 1-based regime label");
  cfg.x0 = static_cast<std::size_t>(x0 - 1);
  cfg.y0 = cfg.value<double>("initial", "y0", 0.0);
  require(cfg.s0 > 0.0 && cfg.y0 >= 0.0, "initial s0 must be positive and y0 nonnegative");
  return cfg;
}

struct RunContext {
  const Options& opts;
  const RunConfig& cfg;
  std::ostream& out;
  std::vector<std::string> artifacts;

  fs::path path(const std::string& name) const { return fs::path(opts.out_dir) / name; }
  void write_json(const std::string& name, const json& j) {
    io::write_json(path(name), j);
    artifacts.push_back(name);
  }
  void write_text(const std::string& name, const std::string& text) {
    io::write_text(path(name), text);
    artifacts.push_back(name);
  }
};

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline std::vector<double> a2_times(const MarketModel& model) {
  auto times = uniform_times(model.horizon(), 101);
  for (std::size_t i = 0; i < model.num_regimes(); ++i)
    for (double b : model.breakpoints(i))
      if (b > 0.0 && b < model.horizon()) times.push_back(b);
  std::sort(times.begin(), times.end());
  return times;
}

inline int cmd_check(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  MarketModel model = cfg.model();
  RateValidationOptions vo;
  vo.rate_bound = cfg.value<double>("validation", "rate_bound", vo.rate_bound);
  vo.divergence_threshold = cfg.value<double>("validation", "divergence_threshold", vo.divergence_threshold);
  double y_max = cfg.value<double>("validation", "y_max", 10.0 * model.horizon());
  auto a1 = validate_rates(model.rates(), y_max, vo);
  auto times = a2_times(model);
  auto a2 = check_no_arbitrage(model, times);

  json checks = json::array();
  for (const auto& c : a1.checks) {
    json e{{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}};
    if (!c.passed) {
      e["from"] = c.from + 1;
      if (c.to != static_cast<std::size_t>(-1)) e["to"] = c.to + 1;
      e["age"] = c.age;
    }
    checks.push_back(e);
    ctx.out << "A1 " << c.name << ": " << (c.passed ? "pass" : "fail") << " (" << c.detail << ")\n";
  }
  json a2j{{"passed", a2.passed},
           {"worst_value", a2.worst_value},
           {"worst_margin", a2.worst_margin},
           {"witness", {{"t", a2.witness_t}, {"regime", a2.witness_regime + 1}, {"z", a2.witness_z}}},
           {"grid_points", times.size()}};
  ctx.out << "A2: " << (a2.passed ? "pass" : "fail") << " (worst J*eta = " << fmt(a2.worst_value)
          << " at t = " << fmt(a2.witness_t) << ", regime " << a2.witness_regime + 1 << ", z = " << fmt(a2.witness_z)
          << ")\n";
  ctx.write_json("check.json", json{{"a1", {{"passed", a1.passed()}, {"y_max", y_max}, {"checks", checks}}}, {"a2", a2j}});
  return a1.passed() && a2.passed ? ok : validation_failure;
}

inline int cmd_integrals(RunContext& ctx) {
  MarketModel model = ctx.cfg.model();
  const auto& ji = model.jump_integrals();
  json regimes = json::array();
  for (std::size_t i = 0; i < model.num_regimes(); ++i) {
    auto emm = mmm_coefficients(model, 0.0, i);
    auto betas = compute_betas(model, 0.0, i);
    double b2_min = betas.beta2.empty() ? 1.0 : *std::min_element(betas.beta2.begin(), betas.beta2.end());
    double b2_max = betas.beta2.empty() ? 1.0 : *std::max_element(betas.beta2.begin(), betas.beta2.end());
    double identity = betas.beta1;
    for (std::size_t m = 0; m < betas.beta2.size(); ++m)
      identity += betas.beta2[m] * model.jump().eta_at(m) * model.jump().weight(m);
    auto mv = mv_tradeoff(model, 0.0, i, 1.0);
    regimes.push_back(json{{"regime", i + 1},
                           {"J", emm.j},
                           {"girsanov_drift", emm.girsanov_drift},
                           {"beta1", betas.beta1},
                           {"beta2_min", b2_min},
                           {"beta2_max", b2_max},
                           {"beta_identity_residual", identity},
                           {"delta_c_times_s", mv.delta_c},
                           {"khat_rate", mv.khat_rate}});
    ctx.out << "regime " << i + 1 << ": J = " << fmt(emm.j, 10) << ", beta1 = " << fmt(betas.beta1, 10) << "\n";
  }
  ctx.out << "int eta dnu = " << fmt(ji.eta_mean, 12) << ", int eta^2 dnu = " << fmt(ji.eta_sq, 12)
          << ", |nu| = " << fmt(ji.mass, 12) << ", c = " << fmt(ji.c, 12) << "\n";
  ctx.write_json("integrals.json",
                 json{{"jump", {{"eta_mean", ji.eta_mean}, {"eta_sq", ji.eta_sq}, {"mass", ji.mass}, {"c", ji.c},
                                {"nodes", model.jump().size()}}},
                      {"t", 0.0},
                      {"regimes", regimes}});
  return ok;
}

inline int cmd_simulate(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  MarketModel model = cfg.model();
  auto n_paths = cfg.value<std::size_t>("simulate", "paths", 10);
  auto steps = cfg.value<std::size_t>("simulate", "record_steps", 100);
  require(n_paths >= 1 && steps >= 1, "simulate needs paths >= 1 and record_steps >= 1");
  std::vector<double> grid(steps);
  for (std::size_t k = 0; k < steps; ++k)
    grid[k] = k + 1 == steps ? model.horizon() : model.horizon() * static_cast<double>(k + 1) / static_cast<double>(steps);
  std::vector<PathRecord> paths(n_paths);
  parallel_for(n_paths, [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) {
      RandomStream rng = RandomStream::derived(cfg.seed, p);
      paths[p] = simulate_asset_path(model, cfg.s0, cfg.x0, cfg.y0, rng, grid);
    }
  });
  ctx.write_text("paths.csv", io::paths_csv(paths));
  std::size_t regime_events = 0, jump_events = 0;
  for (const auto& p : paths) {
    for (const auto& pt : p.points) {
      if (pt.event == PathEvent::regime) ++regime_events;
      if (pt.event == PathEvent::jump) ++jump_events;
    }
  }
  ctx.out << "simulated " << n_paths << " paths: " << regime_events << " regime transitions, " << jump_events
          << " price jumps\n";
  return ok;
}

inline PriceSurface solve_surface(const MarketModel& model, const PayoffSpec& payoff, const GridSpec& grid,
                                  const std::string& method) {
  if (method == "fd") return solve_price_fd(model, payoff, grid);
  return solve_price(model, payoff, grid);
}

inline std::vector<std::size_t> export_layers(const RunConfig& cfg, const PriceSurface& surface) {
  std::string which = cfg.value<std::string>("output", "surface_layers", "initial");
  if (which == "all") {
    std::vector<std::size_t> all(surface.num_layers());
    for (std::size_t l = 0; l < all.size(); ++l) all[l] = l;
    return all;
  }
  if (which != "initial") throw ConfigError("config: output.surface_layers must be 'initial' or 'all'");
  return {surface.layer_of_step(0)};
}

inline int cmd_price(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  MarketModel model = cfg.model();
  PayoffSpec payoff = cfg.payoff();
  std::string method = cfg.method();
  json summary{{"method", method}, {"payoff", payoff.name()}, {"s0", cfg.s0}, {"x0", cfg.x0 + 1}, {"y0", cfg.y0}};
  if (method == "ie" || method == "fd") {
    GridSpec grid = cfg.grid();
    grid.keep_all_layers = cfg.value<std::string>("output", "surface_layers", "initial") == "all";
    PriceSurface surface = solve_surface(model, payoff, grid, method);
    double price = surface.price_at(0.0, cfg.s0, cfg.x0, cfg.y0);
    double xi = surface.xi_at(0.0, cfg.s0, cfg.x0, cfg.y0);
    summary["price"] = price;
    summary["xi"] = xi;
    summary["grid"] = {{"time_steps", grid.time_steps}, {"s_nodes", grid.s_nodes}, {"ages", surface.grid().ages},
                       {"s_min", surface.grid().s.s_min()}, {"s_max", surface.grid().s.s_max()}};
    summary["diagnostics"] = io::to_json(surface.diagnostics());
    ctx.write_text("surface.csv", io::surface_csv(surface, export_layers(cfg, surface)));
    for (const auto& w : surface.diagnostics().warnings) ctx.out << "warning: " << w << "\n";
    ctx.out << method << " price at s0 = " << fmt(cfg.s0) << ": " << fmt(price, 10) << " (xi = " << fmt(xi, 8) << ")\n";
  } else {
    auto paths = cfg.value<std::size_t>("mc", "paths", 100000);
    McOptions mo{cfg.s0, cfg.x0, cfg.y0, cfg.value<double>("mc", "level", 0.99)};
    McEstimate est = method == "mc-q" ? price_mc_q(model, payoff, paths, cfg.seed, mo)
                                      : price_mc_p_weighted(model, payoff, paths, cfg.seed, mo);
    summary["price"] = est.value;
    summary["estimate"] = io::to_json(est);
    ctx.out << method << " price at s0 = " << fmt(cfg.s0) << ": " << fmt(est.value, 8) << " +- " << fmt(est.std_error, 4)
            << " (" << est.level * 100 << "% CI [" << fmt(est.ci_low, 8) << ", " << fmt(est.ci_high, 8) << "])\n";
  }
  ctx.write_json("price.json", summary);
  return ok;
}

inline int cmd_backtest(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  MarketModel model = cfg.model();
  PayoffSpec payoff = cfg.payoff();
  std::string method = cfg.method();
  if (method != "ie" && method != "fd") throw ConfigError("hedge-backtest needs a surface method (ie or fd), got '" + method + "'");
  GridSpec grid = cfg.grid();
  grid.keep_all_layers = true;
  PriceSurface surface = solve_surface(model, payoff, grid, method);
  BacktestOptions bo;
  bo.n_paths = cfg.value<std::size_t>("backtest", "paths", bo.n_paths);
  bo.rebalance_steps = cfg.value<std::size_t>("backtest", "rebalance_steps", bo.rebalance_steps);
  bo.seed = cfg.seed;
  bo.s0 = cfg.s0;
  bo.x0 = cfg.x0;
  bo.y0 = cfg.y0;
  BacktestReport rep = backtest_hedge(model, surface, payoff, bo);
  json j = io::to_json(rep);
  j["surface_method"] = method;
  j["config"] = cfg.raw;
  ctx.write_json("backtest.json", j);
  ctx.out << "mean L_T = " << fmt(rep.mean_residual) << " +- " << fmt(rep.residual_std_error, 3)
          << ", hedged/unhedged std = " << fmt(rep.std_ratio, 4) << ", corr(dL, dM) = " << fmt(rep.correlation, 4)
          << " +- " << fmt(rep.correlation_std_error, 3) << "\n";
  for (const auto& w : rep.warnings) ctx.out << "warning: " << w << "\n";
  return ok;
}

inline int cmd_xval(RunContext& ctx) {
  const auto& cfg = ctx.cfg;
  MarketModel model = cfg.model();
  PayoffSpec payoff = cfg.payoff();
  GridSpec grid = cfg.grid();
  grid.keep_all_layers = false;
  double tol = cfg.value<double>("xval", "ie_fd_rel_tol", 0.01);
  auto paths = cfg.value<std::size_t>("mc", "paths", 200000);
  McOptions mo{cfg.s0, cfg.x0, cfg.y0, cfg.value<double>("mc", "level", 0.99)};

  double ie = solve_price(model, payoff, grid).price_at(0.0, cfg.s0, cfg.x0, cfg.y0);
  double fd = solve_price_fd(model, payoff, grid).price_at(0.0, cfg.s0, cfg.x0, cfg.y0);
  McEstimate mc = price_mc_q(model, payoff, paths, cfg.seed, mo);

  struct Row {
    std::string pair;
    double a, b, diff, tolerance;
    bool pass;
  };
  std::vector<Row> rows;
  double rel = std::abs(ie - fd) / std::max(std::abs(fd), 1e-300);
  rows.push_back({"ie-fd (relative)", ie, fd, rel, tol, rel <= tol});
  double half = 0.5 * (mc.ci_high - mc.ci_low);
  rows.push_back({"ie-mc (CI half-width)", ie, mc.value, std::abs(ie - mc.value), half, mc.contains(ie)});
  rows.push_back({"fd-mc (CI half-width)", fd, mc.value, std::abs(fd - mc.value), half, mc.contains(fd)});

  json table = json::array();
  bool all = true;
  ctx.out << std::left << std::setw(24) << "pair" << std::setw(16) << "a" << std::setw(16) << "b" << std::setw(14)
          << "|diff|" << std::setw(14) << "tolerance" << "status\n";
  for (const auto& r : rows) {
    all = all && r.pass;
    table.push_back(json{{"pair", r.pair}, {"a", r.a}, {"b", r.b}, {"difference", r.diff}, {"tolerance", r.tolerance},
                         {"pass", r.pass}});
    ctx.out << std::left << std::setw(24) << r.pair << std::setw(16) << fmt(r.a, 9) << std::setw(16) << fmt(r.b, 9)
            << std::setw(14) << fmt(r.diff, 4) << std::setw(14) << fmt(r.tolerance, 4) << (r.pass ? "pass" : "FAIL")
            << "\n";
  }
  ctx.write_json("xval.json", json{{"ie", ie}, {"fd", fd}, {"mc", io::to_json(mc)}, {"rows", table}, {"agree", all}});
  return all ? ok : numerical_failure;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline std::string compiler_id() {
#if defined(__clang__)
  return "clang " __clang_version__;
#elif defined(__GNUC__)
  return "gcc " __VERSION__;
#else
  return "unknown";
#endif
}

inline int dispatch(const Options& opts, std::ostream& out) {
  auto start = std::chrono::steady_clock::now();
  RunConfig cfg = load_config(opts);
  RunContext ctx{opts, cfg, out, {}};
  int code = ok;
  if (opts.subcommand == "check") code = cmd_check(ctx);
  else if (opts.subcommand == "integrals") code = cmd_integrals(ctx);
  else if (opts.subcommand == "simulate") code = cmd_simulate(ctx);
  else if (opts.subcommand == "price") code = cmd_price(ctx);
  else if (opts.subcommand == "hedge-backtest") code = cmd_backtest(ctx);
  else if (opts.subcommand == "xval") code = cmd_xval(ctx);
  else throw ConfigError("unknown subcommand '" + opts.subcommand + "'");
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json manifest{{"subcommand", opts.subcommand},
                {"config", opts.config_path},
                {"config_hash", io::fnv1a_hex(cfg.raw_text)},
                {"seed", cfg.seed},
                {"version", SMJD_VERSION},
                {"compiler", compiler_id()},
                {"threads", max_threads()},
                {"exit_code", code},
                {"artifacts", ctx.artifacts},
                {"wall_time_s", wall}};
  io::write_json(ctx.path(opts.subcommand + "_manifest.json"), manifest);
  return code;
}

/// Parses argv and runs; returns the process exit status.
inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Pricing and hedging under a semi-Markov regime-switching jump diffusion", "smjd"};
  app.require_subcommand(1);
  Options opts;
  std::uint64_t seed = 0;
  std::string method;
  const char* names[] = {"check", "integrals", "simulate", "price", "hedge-backtest", "xval"};
  const char* help[] = {"validate rate assumptions and the no-arbitrage condition",
                        "jump integrals and change-of-measure coefficients at t = 0",
                        "simulate asset paths under the physical measure",
                        "price surface (ie, fd) or Monte Carlo price (mc-q, mc-p)",
                        "backtest the locally risk-minimizing hedge",
                        "cross-validate the integral-equation, finite-difference and Monte Carlo routes"};
  std::vector<CLI::App*> subs;
  for (std::size_t k = 0; k < 6; ++k) {
    CLI::App* sub = app.add_subcommand(names[k], help[k]);
    sub->add_option("--config", opts.config_path, "JSON run configuration")->required();
    sub->add_option("--out", opts.out_dir, "output directory")->capture_default_str();
    sub->add_option("--seed", seed, "master random seed (overrides the config)");
    sub->add_option("--threads", opts.threads, "worker thread cap (0 = all cores)");
    if (sub->get_name() == "price" || sub->get_name() == "hedge-backtest")
      sub->add_option("--method", method, "ie, fd, mc-q or mc-p (overrides the config)");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return config_failure;
  }
  for (std::size_t k = 0; k < subs.size(); ++k) {
    if (!subs[k]->parsed()) continue;
    opts.subcommand = names[k];
    if (subs[k]->count("--seed") > 0) opts.seed = seed;
    if (opts.subcommand == "price" || opts.subcommand == "hedge-backtest")
      if (subs[k]->count("--method") > 0) opts.method = method;
  }
  set_max_threads(opts.threads);
  try {
    return dispatch(opts, out);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return validation_failure;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return numerical_failure;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_failure;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return config_failure;
  } catch (const std::exception& e) {
    err << "numerical error: " << e.what() << "\n";
    return numerical_failure;
  }
}

}  // namespace smjd::cli

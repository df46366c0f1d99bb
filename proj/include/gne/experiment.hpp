// Experiment harness: flat JSON configuration with defaults, instance
// documents, (seed, S, mode) sweeps and the CSV/JSON outputs.
//
// Output files in the target directory:
//   trace_<mode>_S<S>_seed<seed>.csv   k,r_value,rel_dist,wall_time_s,theta_norm_mean
//   fig1_boxdata.csv                   mode,S,seed,final_rel_dist
//   fig2_series.csv                    mode,S,k,mean_rel_dist,std_rel_dist,n
//   manifest.json                      resolved config, references, per-cell status
//
// Every file is written to a temporary name and renamed into place.

#pragma once

#include <gne/errors.hpp>
#include <gne/game.hpp>
#include <gne/orchestrator.hpp>

#include <fmt/format.h>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace gne {

using json = nlohmann::json;

struct ExperimentSpec {
  // instance generation
  Index N = 10;
  Index T = 14;
  std::pair<double, double> q_range{0.006, 0.01};
  std::pair<double, double> c_range{0.055, 0.095};
  std::optional<std::pair<double, double>> rho_range;  ///< unset: U(1.2, 1.8)·T/14
  double xbar = 0.25;
  double cbar = 0.2;
  double a = 0.8;
  double b = 0.02;
  std::optional<Vec> d;  ///< unset: valley profile
  bool include_d_in_cap = false;
  double noise_variance = 0.1;
  std::optional<std::string> instance_path;

  // sweep
  std::vector<RunMode> modes{RunMode::noisy_inexact, RunMode::naive_baseline};
  std::vector<int> S_values{10};
  std::vector<std::uint64_t> seeds = [] {
    std::vector<std::uint64_t> s(20);
    for (size_t k = 0; k < s.size(); ++k) s[k] = k;
    return s;
  }();

  // algorithm
  RunConfig run;
  double reference_tol = 1e-4;
  int reference_max_outer = 2000;
  bool record_wall_time = false;

  EvOverrides overrides() const {
    EvOverrides ov;
    ov.N = N;
    ov.T = T;
    ov.q_range = q_range;
    ov.c_range = c_range;
    ov.rho_range = rho_range;
    ov.xbar = xbar;
    ov.cbar = cbar;
    ov.a = a;
    ov.b = b;
    ov.d = d;
    ov.include_d_in_cap = include_d_in_cap;
    ov.noise_variance = noise_variance;
    return ov;
  }
};

// ------------------------------------------------------------- enum names

inline RunMode parse_mode(const std::string& s, const std::string& field) {
  for (RunMode m : {RunMode::noisy_inexact, RunMode::noisefree_reference, RunMode::naive_baseline}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(field, "unknown mode \"" + s + "\" (expected noisy_inexact, noisefree_reference or naive_baseline)");
}

inline std::string to_string(StepRule r) {
  switch (r) {
    case StepRule::harmonic: return "harmonic";
    case StepRule::literal_power: return "literal_power";
    case StepRule::inverse_lipschitz: return "inverse_lipschitz";
  }
  return "unknown";
}

inline StepRule parse_step_rule(const std::string& s, const std::string& field) {
  for (StepRule r : {StepRule::harmonic, StepRule::literal_power, StepRule::inverse_lipschitz}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError(field, "unknown step rule \"" + s + "\" (expected harmonic, literal_power or inverse_lipschitz)");
}

inline QueryMethod parse_query_method(const std::string& s, const std::string& field) {
  for (QueryMethod m : {QueryMethod::two_stage_nullspace, QueryMethod::two_stage_penalty, QueryMethod::ridge}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError(field, "unknown query method \"" + s +
                               "\" (expected two_stage_nullspace, two_stage_penalty or ridge)");
}

inline BatchSource parse_batch(const std::string& s, const std::string& field) {
  if (s == "synthetic") return BatchSource::synthetic;
  if (s == "real") return BatchSource::real;
  throw ConfigError(field, "unknown batch source \"" + s + "\" (expected synthetic or real)");
}

// --------------------------------------------------------- config parsing

inline size_t edit_distance(const std::string& x, const std::string& y) {
  std::vector<size_t> prev(y.size() + 1), cur(y.size() + 1);
  for (size_t j = 0; j <= y.size(); ++j) prev[j] = j;
  for (size_t i = 1; i <= x.size(); ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= y.size(); ++j) {
      const size_t sub = prev[j - 1] + (x[i - 1] == y[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[y.size()];
}

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "N",          "T",           "q_range",        "c_range",          "rho_range",         "xbar",
      "cbar",       "a",           "b",              "d",                "include_d_in_cap",  "noise_variance",
      "instance_path", "modes",    "S",              "seeds",            "K",                 "batch",
      "mu",         "gamma0",      "step_rule",      "iters_per_outer",  "min_iters",         "fixed_inner_iters",
      "alpha0",     "grad_cap",    "theta_lo",       "theta_hi",         "cov_eps",           "naive_inner_iters",
      "reference_inner_iters",     "query_method",   "slack_eps",        "qp_tol",            "tie_break_ridge",
      "reference_tol", "reference_max_outer",        "record_wall_time"};
  return keys;
}

namespace detail {

inline double get_number(const json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(field, "expected a finite number");
  return x;
}

inline long long get_integer(const json& v, const std::string& field) {
  if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
  return v.get<long long>();
}

inline bool get_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field, "expected true or false");
  return v.get<bool>();
}

inline std::string get_string(const json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field, "expected a string");
  return v.get<std::string>();
}

inline std::pair<double, double> get_range(const json& v, const std::string& field) {
  if (!v.is_array() || v.size() != 2) throw ConfigError(field, "expected [lo, hi]");
  const double lo = get_number(v[0], field + "[0]"), hi = get_number(v[1], field + "[1]");
  if (lo > hi) throw ConfigError(field, "lo must not exceed hi");
  return {lo, hi};
}

inline Vec get_vector(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field, "expected an array of numbers");
  Vec out(static_cast<Index>(v.size()));
  for (size_t k = 0; k < v.size(); ++k) out(static_cast<Index>(k)) = get_number(v[k], field + "[" + std::to_string(k) + "]");
  return out;
}

inline json vec_to_json(const Vec& v) {
  json a = json::array();
  for (Index k = 0; k < v.size(); ++k) a.push_back(v(k));
  return a;
}

template <class Fn>
void with_key(const json& j, const char* key, Fn&& fn) {
  auto it = j.find(key);
  if (it != j.end()) fn(*it, std::string(key));
}

}  // namespace detail

/// Resolves a flat JSON object against the defaults. Unknown keys and
/// invariant violations raise ConfigError naming the field.
inline ExperimentSpec parse_config(const json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("", "configuration must be a JSON object");
  const auto& keys = config_keys();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) != keys.end()) continue;
    std::string best;
    size_t best_d = 1000;
    for (const std::string& k : keys) {
      const size_t dist = edit_distance(it.key(), k);
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    std::string msg = "unknown key";
    if (best_d <= std::max<size_t>(2, it.key().size() / 3)) msg += " (did you mean \"" + best + "\"?)";
    throw ConfigError(it.key(), msg);
  }

  ExperimentSpec s;
  auto positive_int = [](const json& v, const std::string& f) {
    const long long x = get_integer(v, f);
    if (x < 1) throw ConfigError(f, "must be ≥ 1");
    return x;
  };
  auto positive = [](const json& v, const std::string& f) {
    const double x = get_number(v, f);
    if (!(x > 0.0)) throw ConfigError(f, "must be positive");
    return x;
  };
  auto nonneg = [](const json& v, const std::string& f) {
    const double x = get_number(v, f);
    if (!(x >= 0.0)) throw ConfigError(f, "must be nonnegative");
    return x;
  };

  with_key(j, "N", [&](const json& v, const std::string& f) { s.N = positive_int(v, f); });
  with_key(j, "T", [&](const json& v, const std::string& f) { s.T = positive_int(v, f); });
  with_key(j, "q_range", [&](const json& v, const std::string& f) {
    s.q_range = get_range(v, f);
    if (!(s.q_range.first > 0.0)) throw ConfigError(f, "q must be positive");
  });
  with_key(j, "c_range", [&](const json& v, const std::string& f) { s.c_range = get_range(v, f); });
  with_key(j, "rho_range", [&](const json& v, const std::string& f) {
    if (v.is_null()) return;
    s.rho_range = get_range(v, f);
    if (s.rho_range->first < 0.0) throw ConfigError(f, "rho must be nonnegative");
  });
  with_key(j, "xbar", [&](const json& v, const std::string& f) { s.xbar = positive(v, f); });
  with_key(j, "cbar", [&](const json& v, const std::string& f) { s.cbar = positive(v, f); });
  with_key(j, "a", [&](const json& v, const std::string& f) { s.a = positive(v, f); });
  with_key(j, "b", [&](const json& v, const std::string& f) { s.b = nonneg(v, f); });
  with_key(j, "d", [&](const json& v, const std::string& f) {
    if (v.is_null()) return;
    s.d = get_vector(v, f);
    for (Index k = 0; k < s.d->size(); ++k) {
      if ((*s.d)(k) < 0.0) throw ConfigError(f + "[" + std::to_string(k) + "]", "must be nonnegative");
    }
  });
  with_key(j, "include_d_in_cap", [&](const json& v, const std::string& f) { s.include_d_in_cap = get_bool(v, f); });
  with_key(j, "noise_variance", [&](const json& v, const std::string& f) { s.noise_variance = nonneg(v, f); });
  with_key(j, "instance_path", [&](const json& v, const std::string& f) {
    if (!v.is_null()) s.instance_path = get_string(v, f);
  });

  with_key(j, "modes", [&](const json& v, const std::string& f) {
    if (!v.is_array() || v.empty()) throw ConfigError(f, "expected a nonempty array of mode names");
    s.modes.clear();
    for (size_t k = 0; k < v.size(); ++k) {
      const std::string fk = f + "[" + std::to_string(k) + "]";
      const RunMode m = parse_mode(get_string(v[k], fk), fk);
      if (std::find(s.modes.begin(), s.modes.end(), m) != s.modes.end()) throw ConfigError(fk, "duplicate mode");
      s.modes.push_back(m);
    }
  });
  with_key(j, "S", [&](const json& v, const std::string& f) {
    s.S_values.clear();
    if (v.is_array()) {
      if (v.empty()) throw ConfigError(f, "expected a nonempty list of batch sizes");
      for (size_t k = 0; k < v.size(); ++k) {
        s.S_values.push_back(static_cast<int>(positive_int(v[k], f + "[" + std::to_string(k) + "]")));
      }
    } else {
      s.S_values.push_back(static_cast<int>(positive_int(v, f)));
    }
  });
  with_key(j, "seeds", [&](const json& v, const std::string& f) {
    if (!v.is_array() || v.empty()) throw ConfigError(f, "expected a nonempty array of seeds");
    s.seeds.clear();
    std::set<std::uint64_t> seen;
    for (size_t k = 0; k < v.size(); ++k) {
      const std::string fk = f + "[" + std::to_string(k) + "]";
      const long long x = get_integer(v[k], fk);
      if (x < 0) throw ConfigError(fk, "seeds must be nonnegative");
      if (!seen.insert(static_cast<std::uint64_t>(x)).second) throw ConfigError(fk, "duplicate seed");
      s.seeds.push_back(static_cast<std::uint64_t>(x));
    }
  });

  RunConfig& r = s.run;
  with_key(j, "K", [&](const json& v, const std::string& f) { r.K = static_cast<int>(positive_int(v, f)); });
  with_key(j, "batch", [&](const json& v, const std::string& f) { r.batch = parse_batch(get_string(v, f), f); });
  with_key(j, "mu", [&](const json& v, const std::string& f) { r.inner.mu = positive(v, f); });
  with_key(j, "gamma0", [&](const json& v, const std::string& f) { r.inner.gamma0 = positive(v, f); });
  with_key(j, "step_rule", [&](const json& v, const std::string& f) { r.inner.step_rule = parse_step_rule(get_string(v, f), f); });
  with_key(j, "iters_per_outer", [&](const json& v, const std::string& f) {
    r.inner.iters_per_outer = static_cast<int>(positive_int(v, f));
  });
  with_key(j, "min_iters", [&](const json& v, const std::string& f) { r.inner.min_iters = static_cast<int>(positive_int(v, f)); });
  with_key(j, "fixed_inner_iters", [&](const json& v, const std::string& f) {
    if (!v.is_null()) r.inner.fixed_iters = static_cast<int>(positive_int(v, f));
  });
  with_key(j, "alpha0", [&](const json& v, const std::string& f) { r.inner.alpha0 = positive(v, f); });
  with_key(j, "grad_cap", [&](const json& v, const std::string& f) { r.inner.grad_cap = positive(v, f); });
  with_key(j, "theta_lo", [&](const json& v, const std::string& f) { r.box.lo = get_number(v, f); });
  with_key(j, "theta_hi", [&](const json& v, const std::string& f) { r.box.hi = get_number(v, f); });
  with_key(j, "cov_eps", [&](const json& v, const std::string& f) { r.cov_eps = nonneg(v, f); });
  with_key(j, "naive_inner_iters", [&](const json& v, const std::string& f) {
    r.naive_inner_iters = static_cast<int>(positive_int(v, f));
  });
  with_key(j, "reference_inner_iters", [&](const json& v, const std::string& f) {
    r.reference_inner_iters = static_cast<int>(positive_int(v, f));
  });
  with_key(j, "query_method", [&](const json& v, const std::string& f) {
    r.query.method = parse_query_method(get_string(v, f), f);
  });
  with_key(j, "slack_eps", [&](const json& v, const std::string& f) { r.query.slack_eps = positive(v, f); });
  with_key(j, "qp_tol", [&](const json& v, const std::string& f) { r.query.qp_tol = positive(v, f); });
  with_key(j, "tie_break_ridge", [&](const json& v, const std::string& f) { r.query.tie_break_ridge = positive(v, f); });
  with_key(j, "reference_tol", [&](const json& v, const std::string& f) { s.reference_tol = positive(v, f); });
  with_key(j, "reference_max_outer", [&](const json& v, const std::string& f) {
    s.reference_max_outer = static_cast<int>(positive_int(v, f));
  });
  with_key(j, "record_wall_time", [&](const json& v, const std::string& f) { s.record_wall_time = get_bool(v, f); });

  if (!(r.box.lo < r.box.hi)) throw ConfigError("theta_lo", "must be below theta_hi");
  if (s.d && s.d->size() != s.T) throw ConfigError("d", "length must equal T = " + std::to_string(s.T));
  if (s.rho_range && s.rho_range->second > static_cast<double>(s.T) * s.xbar) {
    throw ConfigError("rho_range", "upper end exceeds T·xbar, no agent could meet its requirement");
  }
  return s;
}

inline json to_json(const ExperimentSpec& s) {
  using detail::vec_to_json;
  json j;
  j["N"] = s.N;
  j["T"] = s.T;
  j["q_range"] = {s.q_range.first, s.q_range.second};
  j["c_range"] = {s.c_range.first, s.c_range.second};
  j["rho_range"] = s.rho_range ? json{s.rho_range->first, s.rho_range->second} : json(nullptr);
  j["xbar"] = s.xbar;
  j["cbar"] = s.cbar;
  j["a"] = s.a;
  j["b"] = s.b;
  j["d"] = s.d ? vec_to_json(*s.d) : json(nullptr);
  j["include_d_in_cap"] = s.include_d_in_cap;
  j["noise_variance"] = s.noise_variance;
  j["instance_path"] = s.instance_path ? json(*s.instance_path) : json(nullptr);
  json modes = json::array();
  for (RunMode m : s.modes) modes.push_back(to_string(m));
  j["modes"] = modes;
  j["S"] = s.S_values;
  j["seeds"] = s.seeds;
  const RunConfig& r = s.run;
  j["K"] = r.K;
  j["batch"] = to_string(r.batch);
  j["mu"] = r.inner.mu;
  j["gamma0"] = r.inner.gamma0;
  j["step_rule"] = to_string(r.inner.step_rule);
  j["iters_per_outer"] = r.inner.iters_per_outer;
  j["min_iters"] = r.inner.min_iters;
  j["fixed_inner_iters"] = r.inner.fixed_iters ? json(*r.inner.fixed_iters) : json(nullptr);
  j["alpha0"] = r.inner.alpha0;
  j["grad_cap"] = r.inner.grad_cap;
  j["theta_lo"] = r.box.lo;
  j["theta_hi"] = r.box.hi;
  j["cov_eps"] = r.cov_eps;
  j["naive_inner_iters"] = r.naive_inner_iters;
  j["reference_inner_iters"] = r.reference_inner_iters;
  j["query_method"] = to_string(r.query.method);
  j["slack_eps"] = r.query.slack_eps;
  j["qp_tol"] = r.query.qp_tol;
  j["tie_break_ridge"] = r.query.tie_break_ridge;
  j["reference_tol"] = s.reference_tol;
  j["reference_max_outer"] = s.reference_max_outer;
  j["record_wall_time"] = s.record_wall_time;
  return j;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", path + ": parse error: " + e.what());
  }
}

inline ExperimentSpec validate_config(const std::string& path) { return parse_config(read_json_file(path)); }

// ------------------------------------------------------- instance documents

inline json instance_to_json(const GameInstance& g, const NoiseModel& noise) {
  using detail::vec_to_json;
  json agents = json::array();
  for (const AgentSpec& a : g.agents()) {
    agents.push_back({{"q", vec_to_json(a.q_diag)}, {"c", vec_to_json(a.c)}, {"rho", a.rho}, {"xbar", a.xbar}});
  }
  const CouplingSpec& cp = g.coupling();
  return json{{"N", g.num_agents()},       {"T", g.horizon()},
              {"a", cp.a},                 {"b", cp.b},
              {"cbar", cp.cbar},           {"d", vec_to_json(cp.d)},
              {"include_d_in_cap", cp.include_d_in_cap},
              {"noise_variance", noise.variance},
              {"noise_seed", noise.seed},  {"agents", agents}};
}

inline EvSample instance_from_json(const json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("instance", "expected a JSON object");
  auto need = [&](const char* key) -> const json& {
    auto it = j.find(key);
    if (it == j.end()) throw ConfigError(std::string("instance.") + key, "missing");
    return *it;
  };
  CouplingSpec cp;
  cp.a = get_number(need("a"), "instance.a");
  cp.b = get_number(need("b"), "instance.b");
  cp.cbar = get_number(need("cbar"), "instance.cbar");
  cp.d = get_vector(need("d"), "instance.d");
  if (j.contains("include_d_in_cap")) cp.include_d_in_cap = get_bool(j["include_d_in_cap"], "instance.include_d_in_cap");
  const json& ag = need("agents");
  if (!ag.is_array() || ag.empty()) throw ConfigError("instance.agents", "expected a nonempty array");
  std::vector<AgentSpec> agents;
  for (size_t i = 0; i < ag.size(); ++i) {
    const std::string f = "instance.agents[" + std::to_string(i) + "]";
    if (!ag[i].is_object()) throw ConfigError(f, "expected an object");
    for (const char* key : {"q", "c", "rho", "xbar"}) {
      if (!ag[i].contains(key)) throw ConfigError(f + "." + key, "missing");
    }
    agents.push_back(AgentSpec{get_vector(ag[i]["q"], f + ".q"), get_vector(ag[i]["c"], f + ".c"),
                               get_number(ag[i]["rho"], f + ".rho"), get_number(ag[i]["xbar"], f + ".xbar")});
  }
  NoiseModel noise;
  if (j.contains("noise_variance")) noise.variance = get_number(j["noise_variance"], "instance.noise_variance");
  if (j.contains("noise_seed")) noise.seed = static_cast<std::uint64_t>(get_integer(j["noise_seed"], "instance.noise_seed"));
  try {
    return EvSample{GameInstance(std::move(agents), std::move(cp)), noise};
  } catch (const std::invalid_argument& e) {
    throw ConfigError("instance", e.what());
  } catch (const InfeasibleError& e) {
    throw ConfigError("instance", e.what());
  }
}

/// Instance for one sweep seed: generated from the overrides, or the file
/// instance with its oracle noise reseeded per sweep seed.
inline EvSample make_instance(const ExperimentSpec& s, std::uint64_t seed) {
  if (s.instance_path) {
    EvSample e = instance_from_json(read_json_file(*s.instance_path));
    e.noise.seed = seed;
    return e;
  }
  try {
    return sample_ev_instance(seed, s.overrides());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("instance", e.what());
  } catch (const InfeasibleError& e) {
    throw ConfigError("instance", e.what());
  }
}

// ---------------------------------------------------------------- outputs

inline std::string fmt_num(double v) { return fmt::format("{:.17g}", v); }

inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string trace_file_name(RunMode m, int S, std::uint64_t seed) {
  return fmt::format("trace_{}_S{}_seed{}.csv", to_string(m), S, seed);
}

inline std::string trace_csv(const std::vector<TraceRecord>& trace, bool record_wall_time) {
  std::string out = "k,r_value,rel_dist,wall_time_s,theta_norm_mean\n";
  for (const TraceRecord& r : trace) {
    out += fmt::format("{},{},{},{},{}\n", r.k, fmt_num(r.r_value), fmt_num(r.rel_dist.value_or(0.0)),
                       fmt_num(record_wall_time ? r.wall_time : 0.0), fmt_num(r.theta_norm_mean));
  }
  return out;
}

struct CellResult {
  RunMode mode = RunMode::noisy_inexact;
  int S = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::string trace_file;
  double final_rel_dist = 0.0;
  double mean_iter_time = 0.0;
  double max_iter_time = 0.0;
  std::vector<TraceRecord> trace;
};

struct ReferenceResult {
  std::uint64_t seed = 0;
  ReferenceGNE ref;
  double wall_time = 0.0;
  std::string error;
};

struct ExperimentReport {
  std::vector<ReferenceResult> references;
  std::vector<CellResult> cells;
  int exit_code = 0;
};

struct ExperimentOptions {
  int jobs = 1;
  bool keep_traces = false;  ///< keep per-iteration records in the report
  std::function<void(const std::string&)> log;
};

namespace detail {

/// Runs fn(0..n-1) on up to `jobs` threads; results must be written by index.
template <class Fn>
void parallel_for(size_t n, int jobs, Fn&& fn) {
  const size_t workers = std::min<size_t>(n, static_cast<size_t>(std::max(1, jobs)));
  if (workers <= 1) {
    for (size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (size_t k = next++; k < n; k = next++) fn(k);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace detail

inline ReferenceOptions reference_options(const ExperimentSpec& s, std::uint64_t seed) {
  ReferenceOptions o;
  o.tol = s.reference_tol;
  o.max_outer = s.reference_max_outer;
  o.seed = seed;
  o.base = s.run;
  return o;
}

inline ExperimentReport run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                                       const ExperimentOptions& opt = {}) {
  auto log = [&](const std::string& m) {
    if (opt.log) opt.log(m);
  };
  std::filesystem::create_directories(out_dir);
  ExperimentReport rep;

  std::vector<EvSample> instances;
  for (std::uint64_t seed : spec.seeds) instances.push_back(make_instance(spec, seed));

  rep.references.resize(spec.seeds.size());
  detail::parallel_for(spec.seeds.size(), opt.jobs, [&](size_t k) {
    ReferenceResult& rr = rep.references[k];
    rr.seed = spec.seeds[k];
    const auto t0 = std::chrono::steady_clock::now();
    rr.ref = compute_reference_gne(instances[k].game, reference_options(spec, rr.seed));
    rr.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!rr.ref.converged) rr.error = fmt::format("reference not certified (fp_residual {:.3g})", rr.ref.fp_residual);
    log(fmt::format("reference seed {}: route {}, fp_residual {:.3g}", rr.seed, rr.ref.route, rr.ref.fp_residual));
  });

  struct CellKey {
    size_t seed_index;
    int S;
    RunMode mode;
  };
  std::vector<CellKey> keys;
  for (size_t si = 0; si < spec.seeds.size(); ++si) {
    for (int S : spec.S_values) {
      for (RunMode m : spec.modes) keys.push_back({si, S, m});
    }
  }
  rep.cells.resize(keys.size());
  detail::parallel_for(keys.size(), opt.jobs, [&](size_t c) {
    const CellKey& key = keys[c];
    CellResult& cell = rep.cells[c];
    cell.mode = key.mode;
    cell.S = key.S;
    cell.seed = spec.seeds[key.seed_index];
    const ReferenceResult& rr = rep.references[key.seed_index];
    if (!rr.error.empty()) {
      cell.error = rr.error;
      log(fmt::format("cell {} S={} seed={} skipped: {}", to_string(cell.mode), cell.S, cell.seed, cell.error));
      return;
    }
    RunConfig cfg = spec.run;
    cfg.mode = key.mode;
    cfg.S = key.S;
    cfg.seed = cell.seed;
    const EvSample& inst = instances[key.seed_index];
    RunResult res = run(inst.game, inst.noise, cfg, rr.ref);
    if (res.failed) {
      cell.error = res.error;
      log(fmt::format("cell {} S={} seed={} failed after {} iterations: {}", to_string(cell.mode), cell.S, cell.seed,
                      res.trace.size(), res.error));
    } else {
      cell.ok = true;
      cell.final_rel_dist = res.trace.back().rel_dist.value_or(0.0);
    }
    if (!res.trace.empty()) {
      cell.trace_file = trace_file_name(cell.mode, cell.S, cell.seed);
      write_atomic(out_dir / cell.trace_file, trace_csv(res.trace, spec.record_wall_time));
      double sum = 0.0;
      for (const TraceRecord& r : res.trace) {
        sum += r.wall_time;
        cell.max_iter_time = std::max(cell.max_iter_time, r.wall_time);
      }
      cell.mean_iter_time = sum / static_cast<double>(res.trace.size());
    }
    if (opt.keep_traces || cell.ok) cell.trace = std::move(res.trace);
    if (cell.ok) {
      log(fmt::format("cell {} S={} seed={}: final rel_dist {:.4g}", to_string(cell.mode), cell.S, cell.seed,
                      cell.final_rel_dist));
    }
  });

  std::string fig1 = "mode,S,seed,final_rel_dist\n";
  for (const CellResult& c : rep.cells) {
    if (c.ok) fig1 += fmt::format("{},{},{},{}\n", to_string(c.mode), c.S, c.seed, fmt_num(c.final_rel_dist));
  }
  write_atomic(out_dir / "fig1_boxdata.csv", fig1);

  std::string fig2 = "mode,S,k,mean_rel_dist,std_rel_dist,n\n";
  for (RunMode m : spec.modes) {
    for (int S : spec.S_values) {
      std::vector<std::vector<TraceRecord>> group;
      for (const CellResult& c : rep.cells) {
        if (c.ok && c.mode == m && c.S == S) group.push_back(c.trace);
      }
      for (const SeriesPoint& p : aggregate_series(group)) {
        fig2 += fmt::format("{},{},{},{},{},{}\n", to_string(m), S, p.k, fmt_num(p.mean), fmt_num(p.stddev), p.n);
      }
    }
  }
  write_atomic(out_dir / "fig2_series.csv", fig2);

  json refs = json::array();
  for (const ReferenceResult& r : rep.references) {
    refs.push_back({{"seed", r.seed},
                    {"route", r.ref.route},
                    {"fp_residual", r.ref.fp_residual},
                    {"converged", r.ref.converged},
                    {"iterations", r.ref.iterations},
                    {"wall_time_s", r.wall_time}});
  }
  json cells = json::array();
  size_t ok = 0;
  for (const CellResult& c : rep.cells) {
    ok += c.ok ? 1 : 0;
    json jc{{"mode", to_string(c.mode)},
            {"S", c.S},
            {"seed", c.seed},
            {"status", c.ok ? "ok" : "failed"},
            {"trace_file", c.trace_file},
            {"mean_iteration_time_s", c.mean_iter_time},
            {"max_iteration_time_s", c.max_iter_time}};
    if (c.ok) jc["final_rel_dist"] = c.final_rel_dist;
    if (!c.error.empty()) jc["error"] = c.error;
    cells.push_back(jc);
  }
  const json manifest{{"config", to_json(spec)}, {"references", refs}, {"cells", cells}};
  write_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");

  rep.exit_code = ok == 0 ? 3 : 0;
  if (!opt.keep_traces) {
    for (CellResult& c : rep.cells) c.trace.clear();
  }
  return rep;
}

}  // namespace gne

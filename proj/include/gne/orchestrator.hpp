// The outer active-learning loop: per-agent inexact proximal updates,
// min-norm query selection, noisy best-response probing and residual
// covariance tracking. Also the noise-free reference equilibrium and the
// trace metrics used for the experiment figures.

#pragma once

#include <gne/errors.hpp>
#include <gne/game.hpp>
#include <gne/learner.hpp>
#include <gne/qp.hpp>
#include <gne/query.hpp>
#include <gne/random.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace gne {

enum class RunMode {
  noisy_inexact,        ///< the full scheme with synthetic batches
  noisefree_reference,  ///< zero noise, near-exact proximal steps
  naive_baseline,       ///< one raw noisy sample per update, short fixed inner loop
};

inline std::string to_string(RunMode m) {
  switch (m) {
    case RunMode::noisy_inexact: return "noisy_inexact";
    case RunMode::noisefree_reference: return "noisefree_reference";
    case RunMode::naive_baseline: return "naive_baseline";
  }
  return "unknown";
}

enum class BatchSource {
  synthetic,  ///< S draws around the last probe from the residual covariance
  real,       ///< S fresh oracle probes at the last query
};

inline std::string to_string(BatchSource b) { return b == BatchSource::synthetic ? "synthetic" : "real"; }

struct RunConfig {
  int K = 200;
  int S = 10;
  RunMode mode = RunMode::noisy_inexact;
  BatchSource batch = BatchSource::synthetic;
  std::uint64_t seed = 0;
  InnerLoopConfig inner;
  QuerySelectorConfig query;
  ThetaBox box;
  double cov_eps = 1e-4;
  int naive_inner_iters = 10;
  int reference_inner_iters = 50;
  double feasibility_tol = 1e-8;
  std::optional<Vec> x0;                        ///< replaces the random feasible start
  std::optional<std::vector<ProxyParams>> theta0;  ///< replaces the constant-at-first-probe start

  void validate() const {
    if (K < 1) throw std::invalid_argument("RunConfig: K must be ≥ 1");
    if (S < 1) throw std::invalid_argument("RunConfig: S must be ≥ 1");
    if (!(box.lo < box.hi)) throw std::invalid_argument("RunConfig: theta box must satisfy lo < hi");
    if (!(cov_eps >= 0.0)) throw std::invalid_argument("RunConfig: cov_eps must be nonnegative");
    if (naive_inner_iters < 1 || reference_inner_iters < 1) {
      throw std::invalid_argument("RunConfig: inner budgets must be ≥ 1");
    }
    if (!(feasibility_tol > 0.0)) throw std::invalid_argument("RunConfig: feasibility_tol must be positive");
    inner.validate();
    query.validate();
  }

  /// Inner-loop settings actually used by the mode. The baseline and the
  /// reference take the exact-prox step 1/(‖φ‖² + μ) on a fixed budget.
  InnerLoopConfig effective_inner() const {
    InnerLoopConfig c = inner;
    if (mode == RunMode::naive_baseline) {
      c.step_rule = StepRule::inverse_lipschitz;
      c.fixed_iters = naive_inner_iters;
    } else if (mode == RunMode::noisefree_reference) {
      c.step_rule = StepRule::inverse_lipschitz;
      c.fixed_iters = reference_inner_iters;
    }
    return c;
  }
};

struct TraceRecord {
  int k = 0;
  Vec x_hat;
  double r_value = 0.0;
  std::optional<double> rel_dist;
  std::vector<double> theta_norms;
  double theta_norm_mean = 0.0;
  double wall_time = 0.0;  ///< seconds spent in this outer iteration
  double stage_gap = 0.0;
  double accuracy = 0.0;   ///< α^k, monitoring only
  bool feasible = true;
};

struct ReferenceGNE {
  Vec x_star;
  double fp_residual = kInf;
  std::string route;
  int iterations = 0;
  bool converged = false;
};

inline double rel_dist(const Vec& x, const Vec& x_star) {
  if (x.size() != x_star.size()) throw std::invalid_argument("rel_dist: dimension mismatch");
  const double denom = x_star.norm();
  if (!(denom > 0.0)) throw std::invalid_argument("rel_dist: reference has zero norm");
  return (x - x_star).norm() / denom;
}

/// Projection of a uniform draw from the box onto the collective feasible set.
inline Vec random_feasible_point(const GameInstance& g, std::mt19937_64& rng) {
  const Vec ub = g.upper_bounds();
  Vec u(g.dim());
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (Index k = 0; k < u.size(); ++k) u(k) = ud(rng) * ub(k);
  const QpSolution s = solve_qp(g.joint_program(Mat::Identity(g.dim(), g.dim()), -u));
  if (s.status != QpStatus::optimal) throw SolverError("random_feasible_point: projection QP returned " + std::string(to_string(s.status)));
  return s.x;
}

/// One instance of the outer loop, advanced one iteration at a time.
class ActiveLearner {
 public:
  ActiveLearner(const GameInstance& game, const NoiseModel& noise, RunConfig cfg)
      : game_(game), noise_(noise), cfg_(std::move(cfg)), inner_(cfg_.effective_inner()) {
    cfg_.validate();
    if (cfg_.mode == RunMode::noisefree_reference) noise_.variance = 0.0;
    const Index N = game_.num_agents(), T = game_.horizon();
    draws_.assign(static_cast<size_t>(N), 0);

    if (cfg_.x0) {
      if (cfg_.x0->size() != game_.dim() || !check_feasible(*cfg_.x0, game_.feasible_set(), cfg_.feasibility_tol)) {
        throw std::invalid_argument("RunConfig: x0 must be a feasible collective profile");
      }
      x_hat_ = *cfg_.x0;
    } else {
      auto init = make_stream(cfg_.seed, StreamTag::init);
      x_hat_ = random_feasible_point(game_, init);
    }
    probe_all();
    std::vector<ProxyParams> theta0;
    if (cfg_.theta0) {
      theta0 = *cfg_.theta0;
      if (static_cast<Index>(theta0.size()) != N) throw std::invalid_argument("RunConfig: theta0 needs one entry per agent");
      for (const ProxyParams& pp : theta0) {
        if (pp.out_dim() != T || pp.in_dim() != (N - 1) * T || !pp.within_box()) {
          throw std::invalid_argument("RunConfig: theta0 entry has wrong shape or leaves its box");
        }
      }
    } else {
      for (Index i = 0; i < N; ++i) theta0.push_back(constant_proxy(z_[static_cast<size_t>(i)], (N - 1) * T, cfg_.box));
    }
    state_ = init_learner(theta0, cfg_.cov_eps);
  }

  const Vec& query() const { return x_hat_; }
  /// Latest oracle replies z^k, one per agent.
  const std::vector<Vec>& probes() const { return z_; }
  const LearnerState& state() const { return state_; }
  const RunConfig& config() const { return cfg_; }
  int iteration() const { return state_.k; }

  /// max_i ‖x̂_i − z_i‖ at the current query; the fixed-point residual when noise is off.
  double probe_gap() const {
    double worst = 0.0;
    for (Index i = 0; i < game_.num_agents(); ++i) {
      worst = std::max(worst, (agent_block(x_hat_, i, game_.horizon()) - z_[static_cast<size_t>(i)]).norm());
    }
    return worst;
  }

  TraceRecord step() {
    const auto t0 = std::chrono::steady_clock::now();
    const Index N = game_.num_agents(), T = game_.horizon();
    const int k = state_.k;

    std::vector<ProxyParams> next(static_cast<size_t>(N));
    for (Index i = 0; i < N; ++i) {
      const Vec x_minus_i = opponents(x_hat_, i, T);
      next[static_cast<size_t>(i)] = inner_prox_update(state_, i, batch_for(i, x_minus_i), x_minus_i, inner_, k);
    }
    for (Index i = 0; i < N; ++i) state_.agents[static_cast<size_t>(i)].theta = std::move(next[static_cast<size_t>(i)]);

    std::vector<ProxyParams> theta;
    for (const AgentLearner& a : state_.agents) theta.push_back(a.theta);
    const QueryResult q = select_query(game_, theta, cfg_.query, warm_);
    warm_ = q.warm;
    x_hat_ = q.x;

    TraceRecord rec;
    rec.k = k;
    rec.x_hat = x_hat_;
    rec.r_value = std::max(q.r_value, 0.0);
    rec.stage_gap = q.stage_gap;
    rec.accuracy = inner_.accuracy(k);
    rec.feasible = check_feasible(x_hat_, game_.feasible_set(), cfg_.feasibility_tol);
    if (!rec.feasible) throw SolverError("query outside the feasible set at iteration " + std::to_string(k));

    probe_all();
    if (cfg_.mode != RunMode::naive_baseline) {
      for (Index i = 0; i < N; ++i) {
        const ProxyParams& th = state_.agents[static_cast<size_t>(i)].theta;
        Vec z_minus_i((N - 1) * T);
        for (Index j = 0, slot = 0; j < N; ++j) {
          if (j == i) continue;
          z_minus_i.segment(slot++ * T, T) = z_[static_cast<size_t>(j)];
        }
        update_covariance(state_, i, z_[static_cast<size_t>(i)] - proxy_eval(th, z_minus_i));
      }
    }

    for (const AgentLearner& a : state_.agents) rec.theta_norms.push_back(a.theta.Lambda.norm());
    rec.theta_norm_mean =
        std::accumulate(rec.theta_norms.begin(), rec.theta_norms.end(), 0.0) / static_cast<double>(N);
    state_.k = k + 1;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }

 private:
  Vec probe(Index i, const Vec& x_minus_i) {
    return noisy_best_response(game_, noise_, i, x_minus_i, draws_[static_cast<size_t>(i)]++);
  }

  void probe_all() {
    const Index N = game_.num_agents(), T = game_.horizon();
    z_.resize(static_cast<size_t>(N));
    for (Index i = 0; i < N; ++i) z_[static_cast<size_t>(i)] = probe(i, opponents(x_hat_, i, T));
  }

  std::vector<Vec> batch_for(Index i, const Vec& x_minus_i) {
    const Vec& anchor = z_[static_cast<size_t>(i)];
    if (cfg_.mode != RunMode::noisy_inexact) return {anchor};
    if (cfg_.batch == BatchSource::real) {
      std::vector<Vec> out;
      for (int j = 0; j < cfg_.S; ++j) out.push_back(probe(i, x_minus_i));
      return out;
    }
    auto rng = make_stream(cfg_.seed, StreamTag::synthetic, static_cast<std::uint64_t>(i),
                           static_cast<std::uint64_t>(state_.k));
    return synth_samples(state_.agents[static_cast<size_t>(i)].cov, anchor, cfg_.S, rng);
  }

  const GameInstance& game_;
  NoiseModel noise_;
  RunConfig cfg_;
  InnerLoopConfig inner_;
  LearnerState state_;
  Vec x_hat_;
  std::vector<Vec> z_;
  std::vector<std::uint64_t> draws_;
  std::optional<QueryWarmStart> warm_;
};

struct RunResult {
  std::vector<TraceRecord> trace;  ///< partial when `failed`
  LearnerState state;
  bool failed = false;
  std::string error;
  int feasibility_violations = 0;
};

/// K outer iterations. A solver failure stops the run and keeps the trace so far.
inline RunResult run(const GameInstance& g, const NoiseModel& noise, const RunConfig& cfg,
                     const std::optional<ReferenceGNE>& reference = std::nullopt) {
  RunResult out;
  try {
    ActiveLearner learner(g, noise, cfg);
    for (int k = 0; k < cfg.K; ++k) {
      TraceRecord rec = learner.step();
      if (reference) rec.rel_dist = rel_dist(rec.x_hat, reference->x_star);
      out.trace.push_back(std::move(rec));
      out.state = learner.state();
    }
    out.state = learner.state();
  } catch (const SolverError& e) {
    out.failed = true;
    out.error = e.what();
    if (std::string(e.what()).rfind("query outside", 0) == 0) ++out.feasibility_violations;
  } catch (const InfeasibleError& e) {
    out.failed = true;
    out.error = e.what();
  }
  return out;
}

struct ReferenceOptions {
  double tol = 1e-4;
  int max_outer = 2000;
  std::uint64_t seed = 0;
  RunConfig base;          ///< mode and noise are overridden
  double damping = 0.5;
  int damped_max_iter = 5000;
  bool potential_fallback = true;
};

namespace detail {

/// Minimizer of the exact potential of the price-coupled game over the
/// collective feasible set; a (variational) equilibrium of the game.
inline Vec potential_minimizer(const GameInstance& g) {
  const Index N = g.num_agents(), T = g.horizon(), n = g.dim();
  const CouplingSpec& cp = g.coupling();
  const double w = cp.a / static_cast<double>(N);
  Mat H = w * Mat::Identity(n, n);
  Vec lin(n);
  for (Index i = 0; i < N; ++i) {
    H.block(i * T, i * T, T, T).diagonal() += 2.0 * g.agent(i).q_diag;
    lin.segment(i * T, T) = g.agent(i).c + cp.a * cp.d + Vec::Constant(T, cp.b);
    for (Index j = 0; j < N; ++j) H.block(i * T, j * T, T, T).diagonal().array() += w;
  }
  const QpSolution s = solve_qp(g.joint_program(H, lin), 1e-11, 100000);
  if (s.status != QpStatus::optimal) throw SolverError("potential_minimizer: QP returned " + std::string(to_string(s.status)));
  return s.x;
}

}  // namespace detail

/// Noise-free equilibrium used as the ground truth for relative distances.
/// Routes are tried in order (learned noise-free loop, damped best-response
/// iteration, potential minimization); the first whose exact fixed-point
/// residual is ≤ tol wins. Otherwise the best iterate is returned with
/// converged = false.
inline ReferenceGNE compute_reference_gne(const GameInstance& g, const ReferenceOptions& opt = {}) {
  ReferenceGNE best;
  auto consider = [&](const Vec& x, const std::string& route, int iters) {
    double fp = kInf;
    try {
      fp = fixed_point_residual(g, x);
    } catch (const InfeasibleError&) {
      return false;
    }
    if (fp < best.fp_residual) best = ReferenceGNE{x, fp, route, iters, fp <= opt.tol};
    return fp <= opt.tol;
  };

  {
    RunConfig cfg = opt.base;
    cfg.mode = RunMode::noisefree_reference;
    cfg.seed = opt.seed;
    cfg.K = std::max(cfg.K, 1);
    try {
      ActiveLearner learner(g, NoiseModel{NoiseKind::gaussian_additive, 0.0, 0}, cfg);
      for (int k = 0; k < opt.max_outer; ++k) {
        learner.step();
        if (learner.probe_gap() <= 0.1 * opt.tol) break;
      }
      if (consider(learner.query(), "learned_noisefree", learner.iteration())) return best;
    } catch (const SolverError&) {
    } catch (const InfeasibleError&) {
    }
  }

  {
    Vec x = best.x_star.size() == g.dim() ? best.x_star : g.witness();
    const Index T = g.horizon();
    int it = 0;
    try {
      for (; it < opt.damped_max_iter; ++it) {
        Vec br(g.dim());
        for (Index i = 0; i < g.num_agents(); ++i) br.segment(i * T, T) = best_response_at(g, i, x, 1e-11);
        const double gap = (br - x).cwiseAbs().maxCoeff();
        x = (1.0 - opt.damping) * x + opt.damping * br;
        if (!x.allFinite()) break;
        if (gap <= 1e-3 * opt.tol) break;
      }
      if (consider(x, "damped_best_response", it)) return best;
    } catch (const SolverError&) {
    } catch (const InfeasibleError&) {
    }
  }

  if (opt.potential_fallback) {
    try {
      if (consider(detail::potential_minimizer(g), "potential_minimizer", 1)) return best;
    } catch (const SolverError&) {
    }
  }
  return best;
}

// ----------------------------------------------------------------- metrics

struct RunSummary {
  bool has_rel_dist = false;
  double final_rel_dist = 0.0;
  double median_rel_dist = 0.0;
  double mean_rel_dist = 0.0;
  double final_r_value = 0.0;
};

/// Linear-interpolation quantile (the usual "type 7" definition).
inline double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

inline double interquartile_range(const std::vector<double>& v) { return quantile(v, 0.75) - quantile(v, 0.25); }

/// Least-squares slope of y against its index.
inline double ls_slope(const std::vector<double>& y) {
  const size_t n = y.size();
  if (n < 2) return 0.0;
  const double xm = 0.5 * static_cast<double>(n - 1);
  const double ym = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (size_t k = 0; k < n; ++k) {
    const double dx = static_cast<double>(k) - xm;
    sxy += dx * (y[k] - ym);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Fills rel_dist against the reference (when given) and summarizes the trace.
inline RunSummary metrics(std::vector<TraceRecord>& trace, const std::optional<ReferenceGNE>& reference) {
  if (trace.empty()) throw std::invalid_argument("metrics: empty trace");
  RunSummary s;
  s.final_r_value = trace.back().r_value;
  if (!reference) {
    for (TraceRecord& r : trace) r.rel_dist.reset();
    return s;
  }
  std::vector<double> d;
  for (TraceRecord& r : trace) {
    r.rel_dist = rel_dist(r.x_hat, reference->x_star);
    d.push_back(*r.rel_dist);
  }
  s.has_rel_dist = true;
  s.final_rel_dist = d.back();
  s.mean_rel_dist = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
  s.median_rel_dist = median(d);
  return s;
}

struct SeriesPoint {
  int k = 0;
  double mean = 0.0;
  double stddev = 0.0;  ///< sample standard deviation, 0 when n < 2
  int n = 0;
};

/// Per-iteration mean and spread of rel_dist across runs. Runs may have
/// different lengths (failed cells); each k uses the runs that reached it.
inline std::vector<SeriesPoint> aggregate_series(const std::vector<std::vector<TraceRecord>>& traces) {
  std::vector<SeriesPoint> out;
  size_t len = 0;
  for (const auto& t : traces) len = std::max(len, t.size());
  for (size_t k = 0; k < len; ++k) {
    std::vector<double> v;
    for (const auto& t : traces) {
      if (k < t.size() && t[k].rel_dist) v.push_back(*t[k].rel_dist);
    }
    if (v.empty()) continue;
    SeriesPoint p;
    p.k = static_cast<int>(k);
    p.n = static_cast<int>(v.size());
    p.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - p.mean) * (x - p.mean);
      p.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace gne

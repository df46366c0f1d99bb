// Query selection: the residual r(x, θ) = Σ_i ‖x_i − f̂_i(x_{-i})‖², its
// minimizer set M(θ) over the collective feasible set, and the minimum-norm
// element of that set.
//
// With affine proxies the residual is ‖Gx − h‖² where G = I − L, L holds
// the slope blocks of every proxy and h the stacked biases. Every minimizer
// shares the same Gx, so M(θ) = F ∩ (x₁ + ker G) for any minimizer x₁.

#pragma once

#include <gne/errors.hpp>
#include <gne/game.hpp>
#include <gne/learner.hpp>
#include <gne/qp.hpp>

#include <Eigen/Eigenvalues>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gne {

enum class QueryMethod {
  two_stage_nullspace,  ///< stage 2 over x₁ + ker G
  two_stage_penalty,    ///< stage 2 by penalty continuation on r
  ridge,                ///< single stage: r + ridge·‖x‖²
};

inline std::string to_string(QueryMethod m) {
  switch (m) {
    case QueryMethod::two_stage_nullspace: return "two_stage_nullspace";
    case QueryMethod::two_stage_penalty: return "two_stage_penalty";
    case QueryMethod::ridge: return "ridge";
  }
  return "unknown";
}

struct QuerySelectorConfig {
  double slack_eps = 1e-7;
  double qp_tol = 1e-8;
  double tie_break_ridge = 1e-8;
  QueryMethod method = QueryMethod::two_stage_nullspace;
  /// eigenvalues of GᵀG below null_tol·max(1, λ_max) count as kernel directions
  double null_tol = 1e-12;
  int penalty_rounds = 8;
  int max_iter = 50000;

  void validate() const {
    if (!(slack_eps > 0.0)) throw std::invalid_argument("QuerySelectorConfig: slack_eps must be positive");
    if (!(qp_tol > 0.0)) throw std::invalid_argument("QuerySelectorConfig: qp_tol must be positive");
    if (!(tie_break_ridge > 0.0)) throw std::invalid_argument("QuerySelectorConfig: tie_break_ridge must be positive");
    if (!(null_tol > 0.0)) throw std::invalid_argument("QuerySelectorConfig: null_tol must be positive");
    if (penalty_rounds < 1) throw std::invalid_argument("QuerySelectorConfig: penalty_rounds must be ≥ 1");
  }
};

struct ResidualForm {
  Mat G;
  Vec h;
};

/// Assembles G and h such that r(x, θ) = ‖Gx − h‖². Opponent columns of
/// Λ_i follow the agent order with agent i skipped.
inline ResidualForm residual_form(const std::vector<ProxyParams>& theta, Index T) {
  const Index N = static_cast<Index>(theta.size());
  const Index n = N * T;
  ResidualForm rf{Mat::Identity(n, n), Vec(n)};
  for (Index i = 0; i < N; ++i) {
    const ProxyParams& pp = theta[static_cast<size_t>(i)];
    if (pp.out_dim() != T || pp.in_dim() != n - T) throw std::invalid_argument("residual_form: proxy dimension mismatch");
    Index col = 0;
    for (Index j = 0; j < N; ++j) {
      if (j == i) continue;
      rf.G.block(i * T, j * T, T, T) -= pp.Lambda.block(0, col, T, T);
      col += T;
    }
    rf.h.segment(i * T, T) = pp.Lambda.col(pp.in_dim());
  }
  return rf;
}

inline double residual(const std::vector<ProxyParams>& theta, const Vec& x, Index T) {
  const Index N = static_cast<Index>(theta.size());
  if (x.size() != N * T) throw std::invalid_argument("residual: dimension mismatch");
  double r = 0.0;
  for (Index i = 0; i < N; ++i) {
    r += (agent_block(x, i, T) - proxy_eval(theta[static_cast<size_t>(i)], opponents(x, i, T))).squaredNorm();
  }
  return r;
}

inline double residual(const GameInstance& g, const std::vector<ProxyParams>& theta, const Vec& x) {
  if (static_cast<Index>(theta.size()) != g.num_agents()) throw std::invalid_argument("residual: agent count mismatch");
  return residual(theta, x, g.horizon());
}

struct QueryWarmStart {
  Vec x;
  Vec y_ineq;
  Vec y_box;
};

struct QueryResult {
  Vec x;                ///< the query x̂
  double r_star = 0.0;  ///< stage-1 optimum
  double r_value = 0.0; ///< r at x̂
  double stage_gap = 0.0;  ///< ‖x̂ − x₁‖; zero when M(θ) is numerically a singleton
  Index null_dim = 0;
  QueryMethod method_used = QueryMethod::two_stage_nullspace;
  int iterations = 0;
  QueryWarmStart warm;  ///< stage-1 primal/dual pair for the next call
};

namespace detail {

inline QpSolution solve_or_throw(const QuadProgram& p, const QpOptions& o, const char* what) {
  QpSolution s = solve_qp(p, o);
  if (s.status != QpStatus::optimal) {
    throw SolverError(std::string(what) + ": QP returned " + to_string(s.status));
  }
  return s;
}

inline QpOptions options_from(const QuerySelectorConfig& cfg, const std::optional<QueryWarmStart>& warm, Index dim) {
  QpOptions o;
  o.tol = cfg.qp_tol;
  o.max_iter = cfg.max_iter;
  if (warm && warm->x.size() == dim) {
    o.x0 = warm->x;
    o.y_ineq0 = warm->y_ineq;
    o.y_box0 = warm->y_box;
  }
  return o;
}

/// min ½‖x₁ + Ny‖² subject to x₁ + Ny ∈ F.
inline std::optional<Vec> nullspace_min_norm(const QuadProgram& F, const Vec& x1, const Mat& basis, double tol,
                                             int max_iter) {
  const Index q = basis.cols();
  std::vector<Vec> rows;
  std::vector<double> rhs;
  auto add = [&](const Vec& a, double b) {
    if (a.cwiseAbs().maxCoeff() <= 1e-14) return;
    rows.push_back(a);
    rhs.push_back(b);
  };
  for (Index k = 0; k < x1.size(); ++k) {
    if (std::isfinite(F.ub(k))) add(basis.row(k).transpose(), F.ub(k) - x1(k));
    if (std::isfinite(F.lb(k))) add(-basis.row(k).transpose(), x1(k) - F.lb(k));
  }
  if (F.num_ineq() > 0) {
    const Mat AN = F.A_ineq * basis;
    const Vec slack = F.b_ineq - F.A_ineq * x1;
    for (Index r = 0; r < AN.rows(); ++r) add(AN.row(r).transpose(), slack(r));
  }
  QuadProgram p = make_program(Mat::Identity(q, q), basis.transpose() * x1);
  p.A_ineq.resize(static_cast<Index>(rows.size()), q);
  p.b_ineq.resize(static_cast<Index>(rows.size()));
  for (size_t r = 0; r < rows.size(); ++r) {
    p.A_ineq.row(static_cast<Index>(r)) = rows[r].transpose();
    // x₁ is feasible only up to the solver tolerance
    p.b_ineq(static_cast<Index>(r)) = std::max(rhs[r], 0.0);
  }
  const QpSolution s = solve_qp(p, tol, max_iter);
  if (s.status != QpStatus::optimal) return std::nullopt;
  return Vec(x1 + basis * s.x);
}

}  // namespace detail

/// Minimum-norm element of argmin_{x ∈ F} ‖Gx − h‖² where F is the feasible
/// program (its H and g are ignored).
inline QueryResult select_query(const QuadProgram& F, const ResidualForm& rf, const QuerySelectorConfig& cfg,
                                const std::optional<QueryWarmStart>& warm = std::nullopt) {
  cfg.validate();
  const Index n = F.dim();
  if (rf.G.rows() != n || rf.G.cols() != n || rf.h.size() != n) {
    throw std::invalid_argument("select_query: residual form does not match the feasible set");
  }
  const Mat GtG = rf.G.transpose() * rf.G;
  const Vec Gth = rf.G.transpose() * rf.h;
  const double hh = rf.h.squaredNorm();
  auto r_of = [&](const Vec& x) { return (rf.G * x - rf.h).squaredNorm(); };

  QueryResult out;
  out.method_used = cfg.method;
  QuadProgram p = F;
  const QpOptions o = detail::options_from(cfg, warm, n);

  if (cfg.method == QueryMethod::ridge) {
    p.H = 2.0 * GtG + 2.0 * cfg.tie_break_ridge * Mat::Identity(n, n);
    p.g = -2.0 * Gth;
    const QpSolution s = detail::solve_or_throw(p, o, "select_query (ridge)");
    out.x = s.x;
    out.r_star = out.r_value = std::max(r_of(s.x), 0.0);
    out.iterations = s.iterations;
    out.warm = {s.x, s.y_ineq, s.y_box};
    return out;
  }

  p.H = 2.0 * GtG;
  p.g = -2.0 * Gth;
  const QpSolution s1 = detail::solve_or_throw(p, o, "select_query (stage 1)");
  const Vec& x1 = s1.x;
  out.iterations = s1.iterations;
  out.warm = {s1.x, s1.y_ineq, s1.y_box};
  out.r_star = std::max(s1.objective + hh, 0.0);
  const double r1 = r_of(x1);
  out.r_star = std::min(out.r_star, r1);
  const double bound = out.r_star + cfg.slack_eps * (1.0 + std::abs(out.r_star));
  out.x = x1;
  out.r_value = r1;

  std::optional<Vec> candidate;
  if (cfg.method == QueryMethod::two_stage_nullspace) {
    Eigen::SelfAdjointEigenSolver<Mat> es(GtG);
    const double lmax = es.eigenvalues().maxCoeff();
    const double thr = cfg.null_tol * std::max(1.0, lmax);
    Index q = 0;
    while (q < n && es.eigenvalues()(q) <= thr) ++q;
    out.null_dim = q;
    if (q == 0) return out;
    candidate = detail::nullspace_min_norm(F, x1, es.eigenvectors().leftCols(q), cfg.qp_tol, cfg.max_iter);
  } else {
    double weight = 1.0;
    QpOptions po;
    po.tol = cfg.qp_tol;
    po.max_iter = cfg.max_iter;
    for (int round = 0; round < cfg.penalty_rounds; ++round, weight *= 10.0) {
      p.H = Mat::Identity(n, n) + 2.0 * weight * GtG;
      p.g = -2.0 * weight * Gth;
      const QpSolution s = solve_qp(p, po);
      if (s.status != QpStatus::optimal) break;
      po.x0 = s.x;
      po.y_ineq0 = s.y_ineq;
      po.y_box0 = s.y_box;
      if (r_of(s.x) <= bound) {
        candidate = s.x;
        break;
      }
    }
  }

  if (candidate && check_feasible(*candidate, F, cfg.qp_tol) && r_of(*candidate) <= bound &&
      candidate->norm() <= x1.norm() + 1e-12) {
    out.x = *candidate;
    out.r_value = r_of(*candidate);
    out.stage_gap = (out.x - x1).norm();
  }
  return out;
}

inline QueryResult select_query(const GameInstance& g, const std::vector<ProxyParams>& theta,
                                const QuerySelectorConfig& cfg = {},
                                const std::optional<QueryWarmStart>& warm = std::nullopt) {
  if (static_cast<Index>(theta.size()) != g.num_agents()) throw std::invalid_argument("select_query: agent count mismatch");
  for (const ProxyParams& pp : theta) {
    if (!pp.within_box()) throw std::invalid_argument("select_query: proxy parameters outside their box");
  }
  return select_query(g.feasible_set(), residual_form(theta, g.horizon()), cfg, warm);
}

}  // namespace gne

#include <gne/query.hpp>

#include <gtest/gtest.h>

#include <random>

namespace gne {
namespace {

// N agents on horizon T with identical local constraints and a loose grid cap.
GameInstance plain_game(Index N, Index T, double rho, double xbar, double cbar) {
  std::vector<AgentSpec> agents(static_cast<size_t>(N), AgentSpec{Vec::Constant(T, 0.01), Vec::Zero(T), rho, xbar});
  CouplingSpec cp;
  cp.d = Vec::Zero(T);
  cp.cbar = cbar;
  return GameInstance(agents, cp);
}

ProxyParams slope_proxy(const Mat& slope, const Vec& bias) {
  ProxyParams pp;
  pp.Lambda.resize(slope.rows(), slope.cols() + 1);
  pp.Lambda << slope, bias;
  return pp;
}

// f̂_1(x_2) = x_2 and f̂_2(x_1) = x_1 on a common horizon.
std::vector<ProxyParams> copy_each_other(Index T) {
  return {slope_proxy(Mat::Identity(T, T), Vec::Zero(T)), slope_proxy(Mat::Identity(T, T), Vec::Zero(T))};
}

std::vector<ProxyParams> random_proxies(std::mt19937_64& rng, Index N, Index T, double scale) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<ProxyParams> out;
  for (Index i = 0; i < N; ++i) {
    Mat l((T), (N - 1) * T + 1);
    for (Index r = 0; r < l.rows(); ++r)
      for (Index c = 0; c < l.cols(); ++c) l(r, c) = nd(rng);
    ProxyParams pp;
    pp.Lambda = l;
    out.push_back(pp);
  }
  return out;
}

std::vector<Vec> rejection_sample(const QuadProgram& F, std::mt19937_64& rng, int want) {
  std::vector<Vec> pts;
  for (int tries = 0; tries < 200000 && static_cast<int>(pts.size()) < want; ++tries) {
    Vec y(F.dim());
    for (Index k = 0; k < y.size(); ++k) y(k) = std::uniform_real_distribution<double>(F.lb(k), F.ub(k))(rng);
    if (check_feasible(y, F, 0.0)) pts.push_back(y);
  }
  return pts;
}

TEST(Residual, Examples) {
  ProxyParams zero;
  zero.Lambda = Mat::Zero(2, 1);
  EXPECT_DOUBLE_EQ(residual({zero}, Vec{{1.0, 1.0}}, 2), 2.0);
  const auto th = copy_each_other(3);
  const Vec v{{0.1, 0.2, 0.3}};
  Vec x(6);
  x << v, v;
  EXPECT_EQ(residual(th, x, 3), 0.0);
  EXPECT_THROW(residual(th, Vec::Zero(5), 3), std::invalid_argument);
}

TEST(Residual, MatchesPerAgentSummation) {
  std::mt19937_64 rng(1);
  const Index N = 4, T = 3;
  for (int trial = 0; trial < 10; ++trial) {
    const auto th = random_proxies(rng, N, T, 0.5);
    Vec x(N * T);
    for (Index k = 0; k < x.size(); ++k) x(k) = std::normal_distribution<double>(0.0, 1.0)(rng);
    double ref = 0.0;
    for (Index i = 0; i < N; ++i) {
      const Mat& l = th[static_cast<size_t>(i)].Lambda;
      for (Index t = 0; t < T; ++t) {
        double pred = l(t, l.cols() - 1);
        Index col = 0;
        for (Index j = 0; j < N; ++j) {
          if (j == i) continue;
          for (Index s = 0; s < T; ++s) pred += l(t, col++) * x(j * T + s);
        }
        ref += (x(i * T + t) - pred) * (x(i * T + t) - pred);
      }
    }
    EXPECT_NEAR(residual(th, x, T), ref, 1e-12 * (1.0 + ref));
    const ResidualForm rf = residual_form(th, T);
    EXPECT_NEAR((rf.G * x - rf.h).squaredNorm(), ref, 1e-12 * (1.0 + ref));
  }
}

TEST(SelectQuery, ConstantFeasibleProxiesAreReproduced) {
  const auto s = sample_ev_instance(3, [] {
    EvOverrides ov;
    ov.N = 3;
    ov.T = 4;
    return ov;
  }());
  const GameInstance& g = s.game;
  std::vector<ProxyParams> th;
  for (Index i = 0; i < 3; ++i) th.push_back(constant_proxy(agent_block(g.witness(), i, 4), 8));
  for (QueryMethod m : {QueryMethod::two_stage_nullspace, QueryMethod::two_stage_penalty}) {
    QuerySelectorConfig cfg;
    cfg.method = m;
    const QueryResult q = select_query(g, th, cfg);
    EXPECT_NEAR(q.r_star, 0.0, 1e-10);
    if (m == QueryMethod::two_stage_nullspace) {
      EXPECT_LE((q.x - g.witness()).cwiseAbs().maxCoeff(), 1e-6);
    } else {
      // r = ‖x − ĉ‖² here, so the slack set is a ball of radius √slack_eps
      EXPECT_LE((q.x - g.witness()).squaredNorm(), cfg.slack_eps * (1.0 + q.r_star));
    }
    EXPECT_EQ(q.null_dim, 0);
  }
}

TEST(SelectQuery, DiagonalSegmentPicksOrigin) {
  const GameInstance g = plain_game(2, 1, 0.0, 1.0, 1.0);
  for (QueryMethod m : {QueryMethod::two_stage_nullspace, QueryMethod::two_stage_penalty, QueryMethod::ridge}) {
    QuerySelectorConfig cfg;
    cfg.method = m;
    const QueryResult q = select_query(g, copy_each_other(1), cfg);
    EXPECT_LE(q.x.cwiseAbs().maxCoeff(), m == QueryMethod::ridge ? 1e-4 : 1e-6) << to_string(m);
    EXPECT_NEAR(q.r_star, 0.0, 1e-10);
  }
  QuerySelectorConfig cfg;
  EXPECT_EQ(select_query(g, copy_each_other(1), cfg).null_dim, 1);
}

// On {x₁ = x₂} with Σ_t x_i ≥ ρ the min-norm point spreads ρ evenly: x = ρ/T.
TEST(SelectQuery, MinNormOnSegmentWithChargingRequirement) {
  const Index T = 2;
  const double rho = 0.3;
  const GameInstance g = plain_game(2, T, rho, 0.25, 1.0);
  const auto th = copy_each_other(T);
  const QueryResult q = select_query(g, th);
  EXPECT_LE((q.x - Vec::Constant(4, rho / T)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(q.null_dim, T);
  EXPECT_GT(q.stage_gap, 0.0);

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> ud(0.0, 0.25);
  int checked = 0;
  for (int k = 0; k < 10000 && checked < 100; ++k) {
    const Vec u{{ud(rng), ud(rng)}};
    if (u.sum() < rho) continue;
    Vec y(4);
    y << u, u;
    ASSERT_LE(residual(th, y, T), q.r_star + 1e-7);
    EXPECT_LE(q.x.norm(), y.norm() + 1e-4);
    ++checked;
  }
  EXPECT_EQ(checked, 100);
}

TEST(SelectQuery, SingletonStageTwoKeepsStageOne) {
  std::mt19937_64 rng(3);
  EvOverrides ov;
  ov.N = 3;
  ov.T = 3;
  const auto s = sample_ev_instance(5, ov);
  for (int trial = 0; trial < 5; ++trial) {
    const auto th = random_proxies(rng, 3, 3, 0.2);
    QuerySelectorConfig cfg;
    const QueryResult two = select_query(s.game, th, cfg);
    EXPECT_EQ(two.null_dim, 0);
    EXPECT_LE(two.stage_gap, 10.0 * cfg.qp_tol);
    EXPECT_LE((two.x - two.warm.x).norm(), 10.0 * cfg.qp_tol);
    cfg.method = QueryMethod::ridge;
    const QueryResult ridge = select_query(s.game, th, cfg);
    EXPECT_LE((two.x - ridge.x).norm(), 1e-5);
  }
}

TEST(SelectQuery, OptimalitySandwichAndFeasibility) {
  std::mt19937_64 rng(4);
  const GameInstance g = plain_game(3, 2, 0.1, 0.25, 0.15);
  const QuadProgram F = g.feasible_set();
  const std::vector<Vec> pts = rejection_sample(F, rng, 300);
  ASSERT_GE(pts.size(), 300u);
  for (int trial = 0; trial < 8; ++trial) {
    const auto th = random_proxies(rng, 3, 2, 0.4);
    QuerySelectorConfig cfg;
    const QueryResult q = select_query(g, th, cfg);
    EXPECT_TRUE(check_feasible(q.x, F, cfg.qp_tol));
    EXPECT_LE(residual(g, th, q.x), q.r_star + cfg.slack_eps * (1.0 + std::abs(q.r_star)));
    for (const Vec& y : pts) EXPECT_GE(residual(g, th, y), q.r_star - 10.0 * cfg.qp_tol);
  }
}

TEST(SelectQuery, ZeroResidualMeansProxiesFixedPoint) {
  const GameInstance g = plain_game(2, 2, 0.3, 0.25, 1.0);
  const auto th = copy_each_other(2);
  const QueryResult q = select_query(g, th);
  ASSERT_LE(q.r_value, 1e-12);
  for (Index i = 0; i < 2; ++i) {
    const Vec pred = proxy_eval(th[static_cast<size_t>(i)], opponents(q.x, i, 2));
    EXPECT_LE((agent_block(q.x, i, 2) - pred).cwiseAbs().maxCoeff(), 1e-6);
  }
}

TEST(SelectQuery, WarmStartGivesSameQuery) {
  std::mt19937_64 rng(5);
  const auto s = sample_ev_instance(6);
  const auto th = random_proxies(rng, 10, 14, 0.02);
  const QueryResult cold = select_query(s.game, th);
  const QueryResult warm = select_query(s.game, th, {}, cold.warm);
  EXPECT_LE((cold.x - warm.x).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LE(warm.iterations, cold.iterations);
  EXPECT_TRUE(check_feasible(warm.x, s.game.feasible_set(), 1e-8));
}

TEST(SelectQuery, RejectsBadInput) {
  const GameInstance g = plain_game(2, 1, 0.0, 1.0, 1.0);
  auto th = copy_each_other(1);
  th[0].Lambda(0, 0) = 50.0;
  EXPECT_THROW(select_query(g, th), std::invalid_argument);
  EXPECT_THROW(select_query(g, {th[1]}), std::invalid_argument);
  QuerySelectorConfig bad;
  bad.slack_eps = 0.0;
  EXPECT_THROW(select_query(g, copy_each_other(1), bad), std::invalid_argument);
}

}  // namespace
}  // namespace gne

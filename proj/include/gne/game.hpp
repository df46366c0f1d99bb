// Aggregative EV-charging game.
//
// Agent i chooses an injection profile x_i ∈ R^T and minimizes
//
//     x_iᵀ Q_i x_i + c_iᵀ x_i + (a(σ(x) + d) + b·1)ᵀ x_i
//
// subject to 1ᵀx_i ≥ ρ_i, 0 ≤ x_i ≤ x̄_i·1 and the shared grid cap
// σ(x) ≤ c̄·1 (optionally σ(x) + d ≤ c̄·1), where σ(x) = (1/N) Σ_j x_j.
// Collective vectors stack the agents' profiles: x = (x_1, ..., x_N).

#pragma once

#include <gne/errors.hpp>
#include <gne/qp.hpp>
#include <gne/random.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace gne {

struct AgentSpec {
  Vec q_diag;  ///< diagonal of Q_i, entries > 0
  Vec c;       ///< affine degradation cost
  double rho = 0.0;   ///< minimum total charge
  double xbar = 0.0;  ///< per-step injection cap
};

struct CouplingSpec {
  double a = 0.8;  ///< inverse price elasticity
  double b = 0.02; ///< baseline price
  Vec d;           ///< normalized inflexible demand (price term)
  double cbar = 0.2;
  bool include_d_in_cap = false;  ///< cap reads σ(x) + d ≤ c̄ instead of σ(x) ≤ c̄
};

enum class NoiseKind { gaussian_additive };

struct NoiseModel {
  NoiseKind kind = NoiseKind::gaussian_additive;
  double variance = 0.1;  ///< per component
  std::uint64_t seed = 0; ///< root of the per-agent oracle streams
};

/// Opponent values are accepted this far outside their box/cap before a
/// query is rejected.
inline constexpr double kQueryTolerance = 1e-7;

/// Smooth 14-sample-style valley: peaks near 0.1 at the ends of the horizon,
/// dips to 0 in the middle.
inline Vec valley_profile(Index T, double peak = 0.1) {
  Vec d(T);
  for (Index t = 0; t < T; ++t) {
    d(t) = 0.5 * peak * (1.0 + std::cos(2.0 * std::numbers::pi * (static_cast<double>(t) + 0.5) / static_cast<double>(T)));
  }
  return d;
}

/// Block i (length T) of a stacked collective vector.
inline Vec agent_block(const Vec& x, Index i, Index T) { return x.segment(i * T, T); }

/// Stacked opponents' vector x_{-i}.
inline Vec opponents(const Vec& x, Index i, Index T) {
  const Index n = x.size();
  Vec out(n - T);
  out.head(i * T) = x.head(i * T);
  out.tail(n - (i + 1) * T) = x.tail(n - (i + 1) * T);
  return out;
}

/// σ(x): per-step mean over the N agents.
inline Vec aggregate(const Vec& x, Index N) {
  if (N <= 0 || x.size() % N != 0) {
    throw std::invalid_argument("aggregate: length is not a multiple of the agent count");
  }
  const Index T = x.size() / N;
  Vec s = Vec::Zero(T);
  for (Index i = 0; i < N; ++i) s += x.segment(i * T, T);
  return s / static_cast<double>(N);
}

class GameInstance {
 public:
  GameInstance(std::vector<AgentSpec> agents, CouplingSpec coupling)
      : agents_(std::move(agents)), coupling_(std::move(coupling)) {
    validate();
    const QuadProgram witness_qp = joint_program(Mat::Identity(dim(), dim()), -0.5 * upper_bounds());
    const QpSolution s = solve_qp(witness_qp);
    if (s.status != QpStatus::optimal || !check_feasible(s.x, witness_qp, 1e-8)) {
      throw InfeasibleError("GameInstance: no collective profile satisfies the local and grid constraints");
    }
    witness_ = s.x;
  }

  Index num_agents() const { return static_cast<Index>(agents_.size()); }
  Index horizon() const { return coupling_.d.size(); }
  Index dim() const { return num_agents() * horizon(); }
  const AgentSpec& agent(Index i) const { return agents_.at(static_cast<size_t>(i)); }
  const std::vector<AgentSpec>& agents() const { return agents_; }
  const CouplingSpec& coupling() const { return coupling_; }
  /// A feasible collective profile found at construction.
  const Vec& witness() const { return witness_; }

  /// Right-hand side of the grid cap on σ(x).
  Vec cap() const {
    Vec cap = Vec::Constant(horizon(), coupling_.cbar);
    if (coupling_.include_d_in_cap) cap -= coupling_.d;
    return cap;
  }

  Vec upper_bounds() const {
    const Index T = horizon();
    Vec ub(dim());
    for (Index i = 0; i < num_agents(); ++i) ub.segment(i * T, T).setConstant(agent(i).xbar);
    return ub;
  }

  /// QP over the collective feasible set Ω∩𝒳 with the given objective:
  /// box 0 ≤ x ≤ x̄, rows -1ᵀx_i ≤ -ρ_i (one per agent) and σ(x) ≤ cap (one per step).
  QuadProgram joint_program(Mat H, Vec g) const {
    const Index N = num_agents(), T = horizon();
    QuadProgram p;
    p.H = std::move(H);
    p.g = std::move(g);
    p.lb = Vec::Zero(dim());
    p.ub = upper_bounds();
    p.A_ineq = Mat::Zero(N + T, dim());
    p.b_ineq.resize(N + T);
    for (Index i = 0; i < N; ++i) {
      p.A_ineq.block(i, i * T, 1, T).setConstant(-1.0);
      p.b_ineq(i) = -agent(i).rho;
    }
    const Vec c = cap();
    for (Index t = 0; t < T; ++t) {
      for (Index i = 0; i < N; ++i) p.A_ineq(N + t, i * T + t) = 1.0 / static_cast<double>(N);
      p.b_ineq(N + t) = c(t);
    }
    return p;
  }

  QuadProgram feasible_set() const { return joint_program(Mat::Zero(dim(), dim()), Vec::Zero(dim())); }

 private:
  void validate() const {
    if (agents_.empty()) throw std::invalid_argument("GameInstance: at least one agent required");
    const Index T = coupling_.d.size();
    if (T == 0) throw std::invalid_argument("GameInstance: horizon must be positive (d is empty)");
    for (size_t i = 0; i < agents_.size(); ++i) {
      const AgentSpec& a = agents_[i];
      const std::string tag = "GameInstance: agent " + std::to_string(i) + ": ";
      if (a.q_diag.size() != T || a.c.size() != T) throw std::invalid_argument(tag + "q/c length must equal T");
      if (!(a.q_diag.minCoeff() > 0.0)) throw std::invalid_argument(tag + "q entries must be positive");
      if (!a.c.allFinite()) throw std::invalid_argument(tag + "c must be finite");
      if (!(a.xbar > 0.0)) throw std::invalid_argument(tag + "xbar must be positive");
      if (!(a.rho >= 0.0)) throw std::invalid_argument(tag + "rho must be nonnegative");
      if (a.rho > static_cast<double>(T) * a.xbar) throw std::invalid_argument(tag + "rho exceeds T·xbar");
    }
    if (!(coupling_.a > 0.0)) throw std::invalid_argument("GameInstance: a must be positive");
    if (!(coupling_.b >= 0.0)) throw std::invalid_argument("GameInstance: b must be nonnegative");
    if (!(coupling_.cbar > 0.0)) throw std::invalid_argument("GameInstance: cbar must be positive");
    if (!(coupling_.d.minCoeff() >= 0.0) || !coupling_.d.allFinite()) {
      throw std::invalid_argument("GameInstance: d must be finite and nonnegative");
    }
  }

  std::vector<AgentSpec> agents_;
  CouplingSpec coupling_;
  Vec witness_;
};

/// Exact best response of agent i to the stacked opponents' profile.
/// Throws InfeasibleError when the profile leaves agent i without a feasible
/// choice or lies outside the opponents' boxes.
inline Vec best_response(const GameInstance& g, Index i, const Vec& x_minus_i, double tol = 1e-10) {
  const Index N = g.num_agents(), T = g.horizon();
  if (i < 0 || i >= N) throw std::out_of_range("best_response: agent index out of range");
  if (x_minus_i.size() != (N - 1) * T) throw std::invalid_argument("best_response: x_minus_i has wrong length");

  Vec others = Vec::Zero(T);
  for (Index j = 0, slot = 0; j < N; ++j) {
    if (j == i) continue;
    const Vec xj = x_minus_i.segment(slot * T, T);
    if (!xj.allFinite() || xj.minCoeff() < -kQueryTolerance || xj.maxCoeff() > g.agent(j).xbar + kQueryTolerance) {
      throw InfeasibleError("best_response: opponent " + std::to_string(j) + " outside its box");
    }
    others += xj;
    ++slot;
  }

  const AgentSpec& ag = g.agent(i);
  const CouplingSpec& cp = g.coupling();
  const double n_agents = static_cast<double>(N);
  QuadProgram p;
  p.H = Mat::Zero(T, T);
  p.H.diagonal() = 2.0 * ag.q_diag.array() + 2.0 * cp.a / n_agents;
  p.g = ag.c + cp.a * cp.d + Vec::Constant(T, cp.b) + (cp.a / n_agents) * others;
  p.lb = Vec::Zero(T);
  p.ub = (n_agents * g.cap() - others).cwiseMin(ag.xbar);
  for (Index t = 0; t < T; ++t) {
    if (p.ub(t) < 0.0) {
      if (p.ub(t) < -n_agents * kQueryTolerance) {
        throw InfeasibleError("best_response: grid capacity exhausted at step " + std::to_string(t));
      }
      p.ub(t) = 0.0;
    }
  }
  if (p.ub.sum() < ag.rho - n_agents * kQueryTolerance) {
    throw InfeasibleError("best_response: remaining capacity cannot meet agent " + std::to_string(i) + "'s requirement");
  }
  p.A_ineq = Mat::Constant(1, T, -1.0);
  p.b_ineq = Vec::Constant(1, -std::min(ag.rho, p.ub.sum()));

  const QpSolution s = solve_qp(p, tol, 50000);
  if (s.status == QpStatus::infeasible) throw InfeasibleError("best_response: QP infeasible");
  if (s.status != QpStatus::optimal) {
    throw SolverError(std::string("best_response: QP status ") + to_string(s.status));
  }
  return s.x;
}

/// Best response of agent i read off a full collective vector.
inline Vec best_response_at(const GameInstance& g, Index i, const Vec& x, double tol = 1e-10) {
  return best_response(g, i, opponents(x, i, g.horizon()), tol);
}

/// Additive Gaussian noise for agent i, draw index `draw`.
inline Vec oracle_noise(const NoiseModel& noise, Index i, Index T, std::uint64_t draw) {
  Vec eta = Vec::Zero(T);
  if (noise.variance <= 0.0) return eta;
  auto rng = make_stream(noise.seed, StreamTag::oracle, static_cast<std::uint64_t>(i), draw);
  std::normal_distribution<double> nd(0.0, std::sqrt(noise.variance));
  for (Index t = 0; t < T; ++t) eta(t) = nd(rng);
  return eta;
}

/// z_i = f_i(x_{-i}) + η_i; the draw index addresses agent i's stream, so
/// repeated calls with the same index reproduce the same sample.
inline Vec noisy_best_response(const GameInstance& g, const NoiseModel& noise, Index i, const Vec& x_minus_i,
                               std::uint64_t draw) {
  if (noise.variance < 0.0) throw std::invalid_argument("noisy_best_response: negative variance");
  return best_response(g, i, x_minus_i) + oracle_noise(noise, i, g.horizon(), draw);
}

/// max_i ‖x_i − f_i(x_{-i})‖₂; zero exactly at a GNE.
inline double fixed_point_residual(const GameInstance& g, const Vec& x) {
  double worst = 0.0;
  const Index T = g.horizon();
  for (Index i = 0; i < g.num_agents(); ++i) {
    worst = std::max(worst, (agent_block(x, i, T) - best_response_at(g, i, x)).norm());
  }
  return worst;
}

/// Field replacements for generated EV instances; unset fields keep the
/// default simulation values.
struct EvOverrides {
  std::optional<Index> N, T;
  std::optional<std::pair<double, double>> q_range, c_range, rho_range;
  std::optional<double> xbar, cbar, a, b, noise_variance;
  std::optional<Vec> d;
  std::optional<bool> include_d_in_cap;
};

struct EvSample {
  GameInstance game;
  NoiseModel noise;
};

/// Random EV instance: q_i ~ U(0.006, 0.01), c_i ~ U(0.055, 0.095)^T,
/// ρ_i ~ U(1.2, 1.8)·T/14, x̄_i = 0.25, c̄ = 0.2, a = 0.8, b = 0.02, noise variance
/// 0.1, T = 14, N = 10, d = valley profile.
inline EvSample sample_ev_instance(std::uint64_t seed, const EvOverrides& ov = {}) {
  const Index N = ov.N.value_or(10);
  const Index T = ov.T.value_or(14);
  if (N < 1 || T < 1) throw std::invalid_argument("sample_ev_instance: N and T must be positive");
  const auto [q_lo, q_hi] = ov.q_range.value_or(std::pair{0.006, 0.01});
  const auto [c_lo, c_hi] = ov.c_range.value_or(std::pair{0.055, 0.095});
  // The charging requirement scales with the horizon so shorter horizons
  // stay locally feasible (ρ_i ≤ T·x̄_i).
  const double horizon_scale = static_cast<double>(T) / 14.0;
  const auto [r_lo, r_hi] = ov.rho_range.value_or(std::pair{1.2 * horizon_scale, 1.8 * horizon_scale});
  if (q_lo > q_hi || c_lo > c_hi || r_lo > r_hi) throw std::invalid_argument("sample_ev_instance: empty range");

  auto rng = make_stream(seed, StreamTag::instance);
  std::uniform_real_distribution<double> uq(q_lo, q_hi), uc(c_lo, c_hi), ur(r_lo, r_hi);
  std::vector<AgentSpec> agents(static_cast<size_t>(N));
  for (auto& ag : agents) {
    ag.q_diag = Vec::Constant(T, uq(rng));
    ag.c.resize(T);
    for (Index t = 0; t < T; ++t) ag.c(t) = uc(rng);
    ag.rho = ur(rng);
    ag.xbar = ov.xbar.value_or(0.25);
  }
  CouplingSpec cp;
  cp.a = ov.a.value_or(0.8);
  cp.b = ov.b.value_or(0.02);
  cp.cbar = ov.cbar.value_or(0.2);
  cp.d = ov.d.value_or(valley_profile(T));
  cp.include_d_in_cap = ov.include_d_in_cap.value_or(false);
  if (cp.d.size() != T) throw std::invalid_argument("sample_ev_instance: d must have length T");

  NoiseModel noise;
  noise.variance = ov.noise_variance.value_or(0.1);
  noise.seed = seed;
  return EvSample{GameInstance(std::move(agents), std::move(cp)), noise};
}

}  // namespace gne

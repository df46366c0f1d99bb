// Affine best-response surrogates and their inexact proximal update.
//
// Agent i is modelled by f̂_i(x_{-i}) = Λ_i [x_{-i}; 1] with Λ_i confined to
// the box [lo, hi] componentwise. Each outer iteration moves Λ_i by a number
// of projected stochastic gradient steps on
//
//     (1/S) Σ_j ½‖z_j − Λ[x̂_{-i}; 1]‖² + (μ/2)‖Λ − Λ_i^k‖²_F
//
// where the batch {z_j} consists of noisy best responses observed at x̂_{-i}
// (real probes, or synthetic draws around the last probe using the residual
// covariance estimate).

#pragma once

#include <gne/qp.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace gne {

struct ThetaBox {
  double lo = -10.0;
  double hi = 10.0;
};

struct ProxyParams {
  Mat Lambda;  ///< n_i × (n_{-i} + 1); the last column is the bias
  ThetaBox box;

  Index out_dim() const { return Lambda.rows(); }
  Index in_dim() const { return Lambda.cols() - 1; }
  /// p_i = n_i (n_{-i} + 1)
  Index num_params() const { return Lambda.size(); }
  bool within_box() const {
    return Lambda.size() == 0 || (Lambda.minCoeff() >= box.lo && Lambda.maxCoeff() <= box.hi);
  }
};

/// Λ = [0 | clamp(bias)]: a constant surrogate.
inline ProxyParams constant_proxy(const Vec& bias, Index in_dim, ThetaBox box = {}) {
  ProxyParams pp;
  pp.box = box;
  pp.Lambda = Mat::Zero(bias.size(), in_dim + 1);
  pp.Lambda.col(in_dim) = bias.cwiseMax(box.lo).cwiseMin(box.hi);
  return pp;
}

inline Vec proxy_eval(const ProxyParams& pp, const Vec& x_minus_i) {
  if (x_minus_i.size() != pp.in_dim()) throw std::invalid_argument("proxy_eval: dimension mismatch");
  return pp.Lambda.leftCols(pp.in_dim()) * x_minus_i + pp.Lambda.col(pp.in_dim());
}

inline double mse_loss(const Vec& z, const Vec& pred) {
  if (z.size() != pred.size()) throw std::invalid_argument("mse_loss: dimension mismatch");
  return 0.5 * (z - pred).squaredNorm();
}

/// ∇_Λ ½‖z − Λ[x;1]‖² = (Λ[x;1] − z)[x;1]ᵀ
inline Mat loss_grad(const ProxyParams& pp, const Vec& x_minus_i, const Vec& z) {
  if (z.size() != pp.out_dim()) throw std::invalid_argument("loss_grad: dimension mismatch");
  Vec phi(pp.in_dim() + 1);
  phi << x_minus_i, 1.0;
  return (proxy_eval(pp, x_minus_i) - z) * phi.transpose();
}

enum class StepRule {
  harmonic,          ///< γ_t = γ0 / (1 + t)
  literal_power,     ///< γ_t = 10^{-3(t+1)}
  inverse_lipschitz, ///< γ_t = 1 / (‖[x;1]‖² + μ), the exact-prox step
};

struct InnerLoopConfig {
  double mu = 10.0;
  double gamma0 = 1e-3;
  StepRule step_rule = StepRule::harmonic;
  int iters_per_outer = 10;        ///< t̄ = iters_per_outer · k ...
  int min_iters = 10;              ///< ... but never fewer than this
  std::optional<int> fixed_iters;  ///< overrides the growing budget
  int batch_size = 10;
  double alpha0 = 1.0;
  double grad_cap = 1e6;

  int inner_iters(int k) const {
    if (fixed_iters) return *fixed_iters;
    return std::max(iters_per_outer * k, min_iters);
  }

  double step(int t, double lipschitz) const {
    switch (step_rule) {
      case StepRule::harmonic: return gamma0 / (1.0 + t);
      case StepRule::literal_power: return std::pow(10.0, -3.0 * (t + 1));
      case StepRule::inverse_lipschitz: return 1.0 / lipschitz;
    }
    return 0.0;
  }

  /// Accuracy radius α^k = α0/(1+k)²; recorded for monitoring only.
  double accuracy(int k) const { return alpha0 / ((1.0 + k) * (1.0 + k)); }

  void validate() const {
    if (!(mu > 0.0)) throw std::invalid_argument("InnerLoopConfig: mu must be positive");
    if (!(gamma0 > 0.0)) throw std::invalid_argument("InnerLoopConfig: gamma0 must be positive");
    if (iters_per_outer < 0 || min_iters < 0 || (fixed_iters && *fixed_iters < 0)) {
      throw std::invalid_argument("InnerLoopConfig: iteration counts must be nonnegative");
    }
    if (batch_size < 1) throw std::invalid_argument("InnerLoopConfig: batch_size must be ≥ 1");
    if (!(grad_cap > 0.0)) throw std::invalid_argument("InnerLoopConfig: grad_cap must be positive");
  }
};

struct CovEstimate {
  Mat R_hat;  ///< (1/k) Σ e eᵀ
  Mat V;      ///< V Vᵀ = R_hat
  int count = 0;

  static CovEstimate cold_start(Index n, double eps) {
    return CovEstimate{eps * Mat::Identity(n, n), std::sqrt(eps) * Mat::Identity(n, n), 0};
  }
};

/// Symmetric square-root factor of a PSD matrix; negative rounding noise in
/// the spectrum is clipped and rank-deficient directions stay as zero columns.
inline Mat psd_factor(const Mat& R) {
  if (R.size() == 0) return R;
  Eigen::SelfAdjointEigenSolver<Mat> es(R);
  const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal();
}

struct AgentLearner {
  ProxyParams theta;
  std::vector<Vec> residuals;
  Mat second_moment;  ///< Σ e eᵀ over the history
  CovEstimate cov;
};

struct LearnerState {
  std::vector<AgentLearner> agents;
  int k = 0;  ///< completed outer iterations
};

inline LearnerState init_learner(const std::vector<ProxyParams>& theta0, double cov_eps) {
  LearnerState st;
  for (const ProxyParams& pp : theta0) {
    AgentLearner a;
    a.theta = pp;
    a.second_moment = Mat::Zero(pp.out_dim(), pp.out_dim());
    a.cov = CovEstimate::cold_start(pp.out_dim(), cov_eps);
    st.agents.push_back(std::move(a));
  }
  return st;
}

enum class InnerPath {
  automatic,  ///< rank-one recursion while no entry touches the box, dense otherwise
  dense,      ///< always iterate on the full matrix
};

/// Runs t̄ = cfg.inner_iters(k) projected gradient steps from θ_i^k on the
/// proximal batch objective and returns θ_i^{k+1}.
inline ProxyParams inner_prox_update(const LearnerState& state, Index i, const std::vector<Vec>& samples,
                                     const Vec& x_hat_minus_i, const InnerLoopConfig& cfg, int k,
                                     InnerPath path = InnerPath::automatic) {
  const ProxyParams& anchor = state.agents.at(static_cast<size_t>(i)).theta;
  const Index n = anchor.out_dim(), m = anchor.in_dim();
  if (x_hat_minus_i.size() != m) throw std::invalid_argument("inner_prox_update: x_hat_minus_i dimension mismatch");
  if (samples.empty()) throw std::invalid_argument("inner_prox_update: empty batch");

  // Every sample sits at the same query, so the averaged loss gradient is
  // (Λφ − z̄)φᵀ with z̄ the batch mean.
  Vec zbar = Vec::Zero(n);
  for (const Vec& z : samples) {
    if (z.size() != n) throw std::invalid_argument("inner_prox_update: sample dimension mismatch");
    zbar += z;
  }
  zbar /= static_cast<double>(samples.size());

  Vec phi(m + 1);
  phi << x_hat_minus_i, 1.0;
  const double phi_sq = phi.squaredNorm();
  const double phi_norm = std::sqrt(phi_sq);
  const double lipschitz = phi_sq + cfg.mu;
  const int iters = cfg.inner_iters(k);
  const double lo = anchor.box.lo, hi = anchor.box.hi;

  ProxyParams out = anchor;
  int t = 0;

  if (path == InnerPath::automatic) {
    // While unprojected, ξ_t = Λ^k + u_t φᵀ; track u only.
    const Vec p0 = anchor.Lambda * phi;
    Vec u_lo = Vec::Constant(n, -kInf), u_hi = Vec::Constant(n, kInf);
    for (Index c = 0; c <= m; ++c) {
      if (phi(c) == 0.0) continue;
      for (Index r = 0; r < n; ++r) {
        double a = (lo - anchor.Lambda(r, c)) / phi(c);
        double b = (hi - anchor.Lambda(r, c)) / phi(c);
        if (a > b) std::swap(a, b);
        u_lo(r) = std::max(u_lo(r), a);
        u_hi(r) = std::min(u_hi(r), b);
      }
    }
    Vec u = Vec::Zero(n);
    bool left_region = false;
    for (; t < iters; ++t) {
      const Vec w = p0 + phi_sq * u - zbar + cfg.mu * u;
      const double gnorm = w.norm() * phi_norm;
      const double scale = gnorm > cfg.grad_cap ? cfg.grad_cap / gnorm : 1.0;
      const Vec u_next = u - cfg.step(t, lipschitz) * scale * w;
      if ((u_next.array() < u_lo.array()).any() || (u_next.array() > u_hi.array()).any()) {
        left_region = true;
        break;
      }
      u = u_next;
    }
    out.Lambda = anchor.Lambda + u * phi.transpose();
    if (!left_region) {
      out.Lambda = out.Lambda.cwiseMax(lo).cwiseMin(hi);
      return out;
    }
  }

  for (; t < iters; ++t) {
    const Vec resid = out.Lambda * phi - zbar;
    Mat grad = resid * phi.transpose() + cfg.mu * (out.Lambda - anchor.Lambda);
    const double gnorm = grad.norm();
    if (gnorm > cfg.grad_cap) grad *= cfg.grad_cap / gnorm;
    out.Lambda = (out.Lambda - cfg.step(t, lipschitz) * grad).cwiseMax(lo).cwiseMin(hi);
  }
  return out;
}

/// Appends e_new to agent i's residual history and refreshes
/// R̂ = (1/k) Σ e eᵀ (no mean subtraction) together with its factor.
inline CovEstimate update_covariance(LearnerState& state, Index i, const Vec& e_new) {
  AgentLearner& a = state.agents.at(static_cast<size_t>(i));
  if (e_new.size() != a.theta.out_dim()) throw std::invalid_argument("update_covariance: dimension mismatch");
  a.residuals.push_back(e_new);
  a.second_moment.noalias() += e_new * e_new.transpose();
  const int k = static_cast<int>(a.residuals.size());
  a.cov.R_hat = a.second_moment / static_cast<double>(k);
  a.cov.V = psd_factor(a.cov.R_hat);
  a.cov.count = k;
  return a.cov;
}

/// S draws z_anchor + V ν_j with ν_j ~ N(0, I).
inline std::vector<Vec> synth_samples(const CovEstimate& cov, const Vec& z_anchor, int S, std::mt19937_64& stream) {
  if (S < 1) throw std::invalid_argument("synth_samples: S must be ≥ 1");
  if (cov.V.rows() != z_anchor.size()) throw std::invalid_argument("synth_samples: dimension mismatch");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Vec> out;
  out.reserve(static_cast<size_t>(S));
  Vec nu(cov.V.cols());
  for (int j = 0; j < S; ++j) {
    for (Index c = 0; c < nu.size(); ++c) nu(c) = nd(stream);
    out.push_back(z_anchor + cov.V * nu);
  }
  return out;
}

}  // namespace gne

// Dense convex quadratic programming.
//
// Solves
//
//     minimize    ½ xᵀHx + gᵀx
//     subject to  A_ineq x ≤ b_ineq,   lb ≤ x ≤ ub
//
// with an operator-splitting (ADMM) iteration in the style of OSQP, followed
// by an active-set polishing step that recovers a solution accurate to the
// requested KKT tolerance. All instances handled here are small (a few
// hundred variables at most), so everything is dense.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gne {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct QuadProgram {
  Mat H;       ///< symmetric PSD, m×m
  Vec g;       ///< linear cost, length m
  Mat A_ineq;  ///< q×m, rows encode a·x ≤ b
  Vec b_ineq;  ///< length q
  Vec lb;      ///< may contain -inf
  Vec ub;      ///< may contain +inf

  Index dim() const { return g.size(); }
  Index num_ineq() const { return A_ineq.rows(); }

  double objective(const Vec& x) const { return 0.5 * x.dot(H * x) + g.dot(x); }

  /// Throws std::invalid_argument when dimensions disagree, H is not
  /// symmetric PSD, or lb > ub somewhere.
  void validate() const {
    const Index m = g.size();
    if (H.rows() != m || H.cols() != m) {
      throw std::invalid_argument("QuadProgram: H must be m×m with m = g.size()");
    }
    if (lb.size() != m || ub.size() != m) {
      throw std::invalid_argument("QuadProgram: lb/ub must have length m");
    }
    if (A_ineq.rows() != b_ineq.size() || (A_ineq.rows() > 0 && A_ineq.cols() != m)) {
      throw std::invalid_argument("QuadProgram: A_ineq must be q×m with q = b_ineq.size()");
    }
    if (!H.allFinite() || !g.allFinite() || !A_ineq.allFinite() || !b_ineq.allFinite()) {
      throw std::invalid_argument("QuadProgram: non-finite data");
    }
    const double h_norm = H.cwiseAbs().maxCoeff();
    if (m > 0 && (H - H.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, h_norm)) {
      throw std::invalid_argument("QuadProgram: H is not symmetric");
    }
    if (m > 0 && h_norm > 0.0) {
      // eigenvalues ≥ -1e-10·‖H‖  ⟺  H + 1e-10·‖H‖·I admits a Cholesky factor
      Mat shifted = H;
      shifted.diagonal().array() += 1e-10 * h_norm;
      if (shifted.llt().info() != Eigen::Success) {
        throw std::invalid_argument("QuadProgram: H is not positive semidefinite");
      }
    }
    for (Index j = 0; j < m; ++j) {
      if (std::isnan(lb(j)) || std::isnan(ub(j)) || lb(j) > ub(j)) {
        throw std::invalid_argument("QuadProgram: lb > ub at index " + std::to_string(j));
      }
    }
  }
};

/// Program with no inequality rows and an infinite box.
inline QuadProgram make_program(Mat H, Vec g) {
  QuadProgram p;
  const Index m = g.size();
  p.H = std::move(H);
  p.g = std::move(g);
  p.A_ineq = Mat(0, m);
  p.b_ineq = Vec(0);
  p.lb = Vec::Constant(m, -kInf);
  p.ub = Vec::Constant(m, kInf);
  return p;
}

enum class QpStatus { optimal, max_iter, infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct QpSolution {
  Vec x;
  Vec y_ineq;  ///< multipliers of A_ineq rows (≥ 0 at optimum)
  Vec y_box;   ///< box multipliers: > 0 at an active upper bound, < 0 at an active lower bound
  double objective = 0.0;
  double kkt_residual = kInf;
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
};

struct QpOptions {
  double tol = 1e-8;
  int max_iter = 50000;
  std::optional<Vec> x0;       ///< optional initial iterate
  std::optional<Vec> y_ineq0;  ///< optional initial multipliers (used with x0)
  std::optional<Vec> y_box0;
};

/// True iff every box and inequality constraint is violated by at most tol.
inline bool check_feasible(const Vec& x, const QuadProgram& p, double tol) {
  if (x.size() != p.dim()) {
    throw std::invalid_argument("check_feasible: dimension mismatch");
  }
  for (Index j = 0; j < x.size(); ++j) {
    if (!std::isfinite(x(j))) return false;
    if (x(j) < p.lb(j) - tol || x(j) > p.ub(j) + tol) return false;
  }
  if (p.num_ineq() > 0) {
    const Vec ax = p.A_ineq * x;
    for (Index r = 0; r < ax.size(); ++r) {
      if (ax(r) > p.b_ineq(r) + tol) return false;
    }
  }
  return true;
}

/// Largest constraint violation of x (0 when feasible).
inline double constraint_violation(const Vec& x, const QuadProgram& p) {
  double v = 0.0;
  for (Index j = 0; j < x.size(); ++j) {
    v = std::max({v, p.lb(j) - x(j), x(j) - p.ub(j)});
  }
  if (p.num_ineq() > 0) {
    const Vec ax = p.A_ineq * x;
    for (Index r = 0; r < ax.size(); ++r) v = std::max(v, ax(r) - p.b_ineq(r));
  }
  return v;
}

/// max(primal violation, ‖stationarity‖∞, complementarity, dual sign violation).
inline double kkt_residual(const QuadProgram& p, const Vec& x, const Vec& y_ineq, const Vec& y_box) {
  double res = constraint_violation(x, p);
  Vec grad = p.H * x + p.g + y_box;
  if (p.num_ineq() > 0) grad += p.A_ineq.transpose() * y_ineq;
  res = std::max(res, grad.cwiseAbs().maxCoeff());
  if (p.num_ineq() > 0) {
    const Vec ax = p.A_ineq * x;
    for (Index r = 0; r < ax.size(); ++r) {
      const double y = y_ineq(r);
      res = std::max(res, std::max(-y, 0.0));
      res = std::max(res, std::max(y, 0.0) * std::abs(p.b_ineq(r) - ax(r)));
    }
  }
  for (Index j = 0; j < x.size(); ++j) {
    const double y = y_box(j);
    if (y > 0.0) {
      res = std::max(res, std::isfinite(p.ub(j)) ? y * std::abs(p.ub(j) - x(j)) : y);
    } else if (y < 0.0) {
      res = std::max(res, std::isfinite(p.lb(j)) ? -y * std::abs(x(j) - p.lb(j)) : -y);
    }
  }
  return res;
}

namespace detail {

enum class Bound : signed char { none = 0, lower = -1, upper = 1 };

struct PolishResult {
  Vec x, y_ineq, y_box;
  double kkt = kInf;
};

// Solves the equality-constrained QP obtained by fixing the guessed active
// set, then repairs the guess (add violated rows, release wrong-sign
// multipliers) for a bounded number of rounds.
inline std::optional<PolishResult> polish(const QuadProgram& p, std::vector<Bound> box_act,
                                          std::vector<bool> row_act, double tol) {
  const Index m = p.dim();
  const Index q = p.num_ineq();
  const double feas_tol = std::max(tol * 1e-2, 1e-13);
  PolishResult best;

  for (int round = 0; round < 4 * (m + q) + 10; ++round) {
    std::vector<Index> free_idx;
    Vec x = Vec::Zero(m);
    for (Index j = 0; j < m; ++j) {
      if (p.lb(j) == p.ub(j)) {
        box_act[j] = Bound::lower;
        x(j) = p.lb(j);
      } else if (box_act[j] == Bound::lower) {
        x(j) = p.lb(j);
      } else if (box_act[j] == Bound::upper) {
        x(j) = p.ub(j);
      } else {
        free_idx.push_back(j);
      }
    }
    std::vector<Index> rows;
    for (Index r = 0; r < q; ++r) {
      if (row_act[r]) rows.push_back(r);
    }
    const Index nf = static_cast<Index>(free_idx.size());
    const Index na = static_cast<Index>(rows.size());

    Vec y_ineq = Vec::Zero(q);
    if (nf + na > 0) {
      Mat kkt = Mat::Zero(nf + na, nf + na);
      Vec rhs(nf + na);
      const Vec hx_fixed = p.H * x;
      for (Index a = 0; a < nf; ++a) {
        for (Index b = 0; b < nf; ++b) kkt(a, b) = p.H(free_idx[a], free_idx[b]);
        rhs(a) = -p.g(free_idx[a]) - hx_fixed(free_idx[a]);
      }
      for (Index a = 0; a < na; ++a) {
        double fixed_part = 0.0;
        for (Index j = 0; j < m; ++j) fixed_part += p.A_ineq(rows[a], j) * x(j);
        rhs(nf + a) = p.b_ineq(rows[a]) - fixed_part;
        for (Index b = 0; b < nf; ++b) {
          kkt(nf + a, b) = p.A_ineq(rows[a], free_idx[b]);
          kkt(b, nf + a) = p.A_ineq(rows[a], free_idx[b]);
        }
      }
      Eigen::ColPivHouseholderQR<Mat> qr(kkt);
      Vec sol = qr.solve(rhs);
      // one step of iterative refinement
      sol += qr.solve(rhs - kkt * sol);
      if (!sol.allFinite()) return std::nullopt;
      for (Index a = 0; a < nf; ++a) x(free_idx[a]) = sol(a);
      for (Index a = 0; a < na; ++a) y_ineq(rows[a]) = sol(nf + a);
    }
    Vec grad = p.H * x + p.g;
    if (q > 0) grad += p.A_ineq.transpose() * y_ineq;
    Vec y_box = Vec::Zero(m);
    for (Index j = 0; j < m; ++j) {
      if (box_act[j] != Bound::none) y_box(j) = -grad(j);
    }

    const double kkt_res = kkt_residual(p, x, y_ineq, y_box);
    if (kkt_res < best.kkt) best = PolishResult{x, y_ineq, y_box, kkt_res};
    if (kkt_res <= tol) return best;

    // Repair: pick the single worst offender among primal violations and
    // wrong-sign multipliers.
    double worst = 0.0;
    enum class Fix { none, add_lower, add_upper, add_row, drop_box, drop_row } fix = Fix::none;
    Index which = -1;
    for (Index j = 0; j < m; ++j) {
      if (box_act[j] != Bound::none || p.lb(j) == p.ub(j)) continue;
      if (p.lb(j) - x(j) > std::max(worst, feas_tol)) { worst = p.lb(j) - x(j); fix = Fix::add_lower; which = j; }
      if (x(j) - p.ub(j) > std::max(worst, feas_tol)) { worst = x(j) - p.ub(j); fix = Fix::add_upper; which = j; }
    }
    if (q > 0) {
      const Vec ax = p.A_ineq * x;
      for (Index r = 0; r < q; ++r) {
        if (!row_act[r] && ax(r) - p.b_ineq(r) > std::max(worst, feas_tol)) {
          worst = ax(r) - p.b_ineq(r);
          fix = Fix::add_row;
          which = r;
        }
      }
    }
    if (fix == Fix::none) {
      for (Index j = 0; j < m; ++j) {
        if (p.lb(j) == p.ub(j)) continue;
        const double wrong = box_act[j] == Bound::lower ? y_box(j) : (box_act[j] == Bound::upper ? -y_box(j) : 0.0);
        if (wrong > std::max(worst, feas_tol)) { worst = wrong; fix = Fix::drop_box; which = j; }
      }
      for (Index r = 0; r < q; ++r) {
        if (row_act[r] && -y_ineq(r) > std::max(worst, feas_tol)) { worst = -y_ineq(r); fix = Fix::drop_row; which = r; }
      }
    }
    switch (fix) {
      case Fix::none: return best;  // nothing left to repair, accuracy-limited
      case Fix::add_lower: box_act[which] = Bound::lower; break;
      case Fix::add_upper: box_act[which] = Bound::upper; break;
      case Fix::add_row: row_act[which] = true; break;
      case Fix::drop_box: box_act[which] = Bound::none; break;
      case Fix::drop_row: row_act[which] = false; break;
    }
  }
  return best;
}

}  // namespace detail

/// Solves p to KKT tolerance opts.tol. Status `infeasible` is reported when an
/// infeasibility certificate is found or the constraint residual stalls
/// above 1e3·tol over a 500-iteration window; `max_iter` returns the best
/// iterate seen together with its KKT residual.
inline QpSolution solve_qp(const QuadProgram& p, const QpOptions& opts = {}) {
  p.validate();
  if (!(opts.tol > 0.0)) throw std::invalid_argument("solve_qp: tol must be positive");

  const Index m = p.dim();
  const Index q = p.num_ineq();
  const double tol = opts.tol;

  QpSolution out;
  out.y_ineq = Vec::Zero(q);
  out.y_box = Vec::Zero(m);
  if (m == 0) {
    out.x = Vec(0);
    out.objective = 0.0;
    out.kkt_residual = q > 0 ? std::max(0.0, -p.b_ineq.minCoeff()) : 0.0;
    out.status = out.kkt_residual <= tol ? QpStatus::optimal : QpStatus::infeasible;
    return out;
  }

  const double sigma = 1e-6;
  const double alpha = 1.6;
  const double rho_min = 1e-6, rho_max = 1e6;
  double rho = 0.1;

  const Mat& A = p.A_ineq;
  Vec rho_a(q), rho_b(m);
  auto set_rho = [&](double r) {
    rho_a.setConstant(r);
    for (Index j = 0; j < m; ++j) {
      const bool lo = std::isfinite(p.lb(j)), hi = std::isfinite(p.ub(j));
      if (lo && hi && p.lb(j) == p.ub(j)) rho_b(j) = 1e3 * r;
      else if (lo || hi) rho_b(j) = r;
      else rho_b(j) = rho_min;
    }
  };
  Eigen::LLT<Mat> llt;
  auto factor = [&]() {
    // H may be singular: σ plays the role of the internal ridge
    Mat k = p.H;
    k.diagonal().array() += sigma;
    k.diagonal() += rho_b;
    if (q > 0) k.noalias() += A.transpose() * rho_a.asDiagonal() * A;
    llt.compute(k);
  };
  set_rho(rho);
  factor();

  Vec x = opts.x0 && opts.x0->size() == m ? *opts.x0 : Vec::Zero(m);
  Vec y_a = opts.y_ineq0 && opts.y_ineq0->size() == q ? *opts.y_ineq0 : Vec::Zero(q);
  Vec y_b = opts.y_box0 && opts.y_box0->size() == m ? *opts.y_box0 : Vec::Zero(m);
  Vec z_a = q > 0 ? Vec((A * x).cwiseMin(p.b_ineq)) : Vec(0);
  Vec z_b = x.cwiseMax(p.lb).cwiseMin(p.ub);

  const double g_scale = p.g.cwiseAbs().maxCoeff();
  double best_kkt = kInf;
  Vec best_x = x, best_ya = y_a, best_yb = y_b;
  double polish_threshold = 1e-3;
  Vec y_a_prev = y_a, y_b_prev = y_b;

  double window_min = kInf, prev_window_min = kInf;
  const int check_every = 10;
  const int stall_window = 500;
  const int forced_polish_every = 1000;
  int last_dir = 0;

  auto active_guess = [&](std::vector<detail::Bound>& box, std::vector<bool>& rows) {
    box.assign(m, detail::Bound::none);
    rows.assign(q, false);
    for (Index j = 0; j < m; ++j) {
      if (std::isfinite(p.lb(j)) && z_b(j) - p.lb(j) < -y_b(j)) box[j] = detail::Bound::lower;
      else if (std::isfinite(p.ub(j)) && p.ub(j) - z_b(j) < y_b(j)) box[j] = detail::Bound::upper;
    }
    for (Index r = 0; r < q; ++r) rows[r] = p.b_ineq(r) - z_a(r) < y_a(r);
  };
  auto finish = [&](const Vec& xs, const Vec& ya, const Vec& yb, double kkt, QpStatus st, int it) {
    out.x = xs;
    out.y_ineq = ya;
    out.y_box = yb;
    out.kkt_residual = kkt;
    out.objective = p.objective(xs);
    out.status = st;
    out.iterations = it;
    return out;
  };

  int it = 0;
  for (; it < opts.max_iter; ++it) {
    Vec rhs = sigma * x - p.g + rho_b.cwiseProduct(z_b) - y_b;
    if (q > 0) rhs.noalias() += A.transpose() * (rho_a.cwiseProduct(z_a) - y_a);
    const Vec xt = llt.solve(rhs);
    x = alpha * xt + (1.0 - alpha) * x;

    const Vec zh_b = alpha * xt + (1.0 - alpha) * z_b;
    const Vec zb_new = (zh_b + y_b.cwiseQuotient(rho_b)).cwiseMax(p.lb).cwiseMin(p.ub);
    y_b += rho_b.cwiseProduct(zh_b - zb_new);
    z_b = zb_new;
    if (q > 0) {
      const Vec zh_a = alpha * (A * xt) + (1.0 - alpha) * z_a;
      const Vec za_new = (zh_a + y_a.cwiseQuotient(rho_a)).cwiseMin(p.b_ineq);
      y_a += rho_a.cwiseProduct(zh_a - za_new);
      z_a = za_new;
    }

    if ((it + 1) % check_every != 0) continue;

    const Vec ax = q > 0 ? Vec(A * x) : Vec(0);
    double prim = (x - z_b).cwiseAbs().maxCoeff();
    if (q > 0) prim = std::max(prim, (ax - z_a).cwiseAbs().maxCoeff());
    const Vec hx = p.H * x;
    Vec aty = y_b;
    if (q > 0) aty += A.transpose() * y_a;
    const double dual = (hx + p.g + aty).cwiseAbs().maxCoeff();

    const double kkt = kkt_residual(p, x, y_a, y_b);
    if (kkt < best_kkt) {
      best_kkt = kkt;
      best_x = x;
      best_ya = y_a;
      best_yb = y_b;
    }
    if (kkt <= tol) return finish(x, y_a, y_b, kkt, QpStatus::optimal, it + 1);

    const double prim_scale = std::max({x.cwiseAbs().maxCoeff(), z_b.cwiseAbs().maxCoeff(),
                                        q > 0 ? ax.cwiseAbs().maxCoeff() : 0.0, 1e-10});
    const double dual_scale = std::max({hx.cwiseAbs().maxCoeff(), aty.cwiseAbs().maxCoeff(), g_scale, 1e-10});
    const double rel = std::max(prim / prim_scale, dual / dual_scale);
    if (rel <= polish_threshold) {
      std::vector<detail::Bound> box;
      std::vector<bool> rows;
      active_guess(box, rows);
      if (auto pol = detail::polish(p, box, rows, tol)) {
        if (pol->kkt <= tol) return finish(pol->x, pol->y_ineq, pol->y_box, pol->kkt, QpStatus::optimal, it + 1);
        if (pol->kkt < best_kkt) {
          best_kkt = pol->kkt;
          best_x = pol->x;
          best_ya = pol->y_ineq;
          best_yb = pol->y_box;
        }
      }
      polish_threshold = std::max(rel * 0.1, 1e-14);
    }

    // Infeasibility certificate on the multiplier increment.
    const Vec dy_b = y_b - y_b_prev;
    const Vec dy_a = y_a - y_a_prev;
    y_b_prev = y_b;
    y_a_prev = y_a;
    const double dy_norm = std::max(dy_b.cwiseAbs().maxCoeff(), q > 0 ? dy_a.cwiseAbs().maxCoeff() : 0.0);
    if (dy_norm > 1e-8) {
      Vec cdy = dy_b;
      if (q > 0) cdy += A.transpose() * dy_a;
      double support = 0.0;
      bool bounded = true;
      for (Index j = 0; j < m && bounded; ++j) {
        if (dy_b(j) > 0) {
          if (!std::isfinite(p.ub(j))) bounded = false; else support += p.ub(j) * dy_b(j);
        } else if (dy_b(j) < 0) {
          if (!std::isfinite(p.lb(j))) bounded = false; else support += p.lb(j) * dy_b(j);
        }
      }
      for (Index r = 0; r < q && bounded; ++r) {
        if (dy_a(r) > 0) support += p.b_ineq(r) * dy_a(r);
        else if (dy_a(r) < 0) bounded = false;
      }
      const double eps_pinf = 1e-6;
      if (bounded && cdy.cwiseAbs().maxCoeff() <= eps_pinf * dy_norm && support < -eps_pinf * dy_norm) {
        return finish(x, y_a, y_b, kkt, QpStatus::infeasible, it + 1);
      }
    }

    // Stall rule on the constraint residual.
    const double viol = constraint_violation(z_b, p) + prim;
    window_min = std::min(window_min, viol);
    if ((it + 1) % stall_window == 0) {
      if (window_min > 1e3 * tol && window_min >= 0.99 * prev_window_min) {
        return finish(x, y_a, y_b, kkt, QpStatus::infeasible, it + 1);
      }
      prev_window_min = window_min;
      window_min = kInf;
    }

    // Active-set guess from the current iterate, tried periodically even
    // when the relative residual stays above the polish threshold.
    if ((it + 1) % forced_polish_every == 0) {
      std::vector<detail::Bound> box;
      std::vector<bool> rows;
      active_guess(box, rows);
      if (auto pol = detail::polish(p, box, rows, tol)) {
        if (pol->kkt <= tol) return finish(pol->x, pol->y_ineq, pol->y_box, pol->kkt, QpStatus::optimal, it + 1);
        if (pol->kkt < best_kkt) {
          best_kkt = pol->kkt;
          best_x = pol->x;
          best_ya = pol->y_ineq;
          best_yb = pol->y_box;
        }
      }
    }

    // Residual-balancing step-size update; a reversal of the previous
    // adjustment only moves halfway (geometrically) to avoid cycling.
    if ((it + 1) % 50 == 0) {
      double step = std::sqrt((prim / prim_scale) / std::max(dual / dual_scale, 1e-300));
      const int dir = step > 1.0 ? 1 : -1;
      step = std::clamp(step, 0.1, 10.0);
      if (dir == -last_dir) step = std::sqrt(step);
      const double rho_new = std::clamp(rho * step, rho_min, rho_max);
      if (rho_new > 5.0 * rho || rho_new < 0.2 * rho) {
        rho = rho_new;
        last_dir = dir;
        set_rho(rho);
        factor();
      }
    }
  }
  return finish(best_x, best_ya, best_yb, best_kkt, best_kkt <= tol ? QpStatus::optimal : QpStatus::max_iter, it);
}

inline QpSolution solve_qp(const QuadProgram& p, double tol, int max_iter) {
  QpOptions o;
  o.tol = tol;
  o.max_iter = max_iter;
  return solve_qp(p, o);
}

}  // namespace gne

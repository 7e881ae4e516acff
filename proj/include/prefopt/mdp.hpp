#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/error.hpp"
#include "prefopt/rng.hpp"

namespace prefopt {

struct DeterministicMdp {
  int X = 0;
  int Y = 0;
  std::vector<int> next;  ///< next[x*Y + y] = T(x, y)
  double gamma = 0.9;
  VectorXd rho;
  int horizon = 1;

  int T(int x, int y) const { return next[static_cast<std::size_t>(x) * Y + y]; }

  void validate() const {
    require(X > 0 && Y > 0, "DeterministicMdp: sizes must be positive");
    require(gamma >= 0 && gamma < 1, "DeterministicMdp: gamma must lie in [0,1)");
    require(static_cast<int>(next.size()) == X * Y, "DeterministicMdp: transition table has wrong size");
    for (int s : next) require(s >= 0 && s < X, "DeterministicMdp: transition leaves the state space");
    require(rho.size() == X, "DeterministicMdp: rho has wrong length");
    require(horizon >= 1, "DeterministicMdp: horizon must be positive");
  }
};

/// Smallest H with gamma^H / (1 - gamma) <= tol.
inline int effective_horizon(double gamma, double tol) {
  require(gamma >= 0 && gamma < 1, "effective_horizon: gamma must lie in [0,1)");
  require(tol > 0, "effective_horizon: tolerance must be positive");
  if (gamma == 0.0) return 1;
  double h = std::ceil(std::log(tol * (1.0 - gamma)) / std::log(gamma));
  return std::max(1, static_cast<int>(h));
}

struct OccupancyMeasure {
  MatrixXd d;  ///< X x Y
};

struct DualVariables {
  VectorXd alpha;        ///< length X
  MatrixXd e_alpha;      ///< r(x,y) + gamma alpha(T(x,y)) - alpha(x)
  double log_partition = 1.0;  ///< log sum d_mu exp(e_alpha / beta)
};

/// P(x, x') = sum_y pi(y|x) 1[T(x,y) = x'].
inline MatrixXd transition_matrix(const TabularPolicy& pi, const DeterministicMdp& m) {
  MatrixXd P = MatrixXd::Zero(m.X, m.X);
  for (int x = 0; x < m.X; ++x)
    for (int y = 0; y < m.Y; ++y) P(x, m.T(x, y)) += pi.probs(x, y);
  return P;
}

inline OccupancyMeasure occupancy_of_policy(const TabularPolicy& pi, const DeterministicMdp& m) {
  require(pi.X() == m.X && pi.Y() == m.Y, "occupancy_of_policy: policy shape mismatch");
  MatrixXd A = MatrixXd::Identity(m.X, m.X) - m.gamma * transition_matrix(pi, m).transpose();
  Eigen::PartialPivLU<MatrixXd> lu(A);
  VectorXd ds = lu.solve((1.0 - m.gamma) * m.rho);
  if (!ds.allFinite()) throw NumericalError("occupancy_of_policy: singular flow system");
  OccupancyMeasure out;
  out.d = pi.probs;
  for (int x = 0; x < m.X; ++x) out.d.row(x) *= ds[x];
  return out;
}

inline VectorXd flow_residual(const OccupancyMeasure& occ, const DeterministicMdp& m) {
  require(occ.d.rows() == m.X && occ.d.cols() == m.Y, "flow_residual: shape mismatch");
  VectorXd res = occ.d.rowwise().sum() - (1.0 - m.gamma) * m.rho;
  for (int x = 0; x < m.X; ++x)
    for (int y = 0; y < m.Y; ++y) res[m.T(x, y)] -= m.gamma * occ.d(x, y);
  return res;
}

inline TabularPolicy policy_from_occupancy(const OccupancyMeasure& occ) {
  VectorXd mass = occ.d.rowwise().sum();
  std::vector<int> empty;
  for (Eigen::Index x = 0; x < mass.size(); ++x)
    if (!(mass[x] > 0)) empty.push_back(static_cast<int>(x));
  if (!empty.empty()) {
    std::ostringstream os;
    os << "policy_from_occupancy: zero-mass states";
    for (int x : empty) os << ' ' << x;
    throw InvalidArgument(os.str());
  }
  TabularPolicy pi;
  pi.probs = occ.d;
  for (Eigen::Index x = 0; x < mass.size(); ++x) pi.probs.row(x) /= mass[x];
  return pi;
}

/// Expected discounted return E[sum_t gamma^t r]; occupancies carry the (1 - gamma) factor.
inline double value_from_occupancy(const OccupancyMeasure& occ, const MatrixXd& r, double gamma) {
  require(occ.d.rows() == r.rows() && occ.d.cols() == r.cols(), "value_from_occupancy: shape mismatch");
  return occ.d.cwiseProduct(r).sum() / (1.0 - gamma);
}

inline double occupancy_kl(const OccupancyMeasure& d, const OccupancyMeasure& d_mu) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.d.size(); ++i) {
    double p = d.d.data()[i];
    if (p == 0.0) continue;
    double q = d_mu.d.data()[i];
    if (q <= 0.0) throw NumericalError("occupancy_kl: reference occupancy vanishes where d is positive");
    s += p * std::log(p / q);
  }
  return s;
}

/// sum d r - beta KL(d || d_mu), the objective of the occupancy-space program.
inline double regularized_occupancy_objective(const OccupancyMeasure& d, const MatrixXd& r,
                                              const OccupancyMeasure& d_mu, double beta) {
  return d.d.cwiseProduct(r).sum() - beta * occupancy_kl(d, d_mu);
}

inline MatrixXd advantage_table(const VectorXd& alpha, const MatrixXd& r, const DeterministicMdp& m) {
  MatrixXd e(m.X, m.Y);
  for (int x = 0; x < m.X; ++x)
    for (int y = 0; y < m.Y; ++y) e(x, y) = r(x, y) + m.gamma * alpha[m.T(x, y)] - alpha[x];
  return e;
}

struct RegularizedOccupancySolution {
  OccupancyMeasure d;
  DualVariables dual;
  double primal_value = 0.0;
  double dual_value = 0.0;
  int iterations = 0;
  double grad_norm = 0.0;
};

/**
 * Maximises sum d r - beta KL(d || d_mu) over Bellman-flow-feasible occupancies
 * by damped Newton on the convex dual
 *   g(alpha) = (1 - gamma) rho^T alpha + beta sum d_mu exp(e_alpha / beta - 1),
 * whose gradient is minus the flow residual of d_alpha = d_mu exp(e_alpha / beta - 1).
 */
inline RegularizedOccupancySolution solve_regularized_occupancy(const MatrixXd& r, const OccupancyMeasure& d_mu,
                                                                double beta, const DeterministicMdp& m,
                                                                double tol = 1e-9, int max_iter = 100000) {
  require(beta > 0, "solve_regularized_occupancy: beta must be positive");
  require((d_mu.d.array() > 0).all(), "solve_regularized_occupancy: d_mu must be strictly positive");
  require(r.rows() == m.X && r.cols() == m.Y, "solve_regularized_occupancy: reward shape mismatch");
  const int X = m.X, Y = m.Y;
  MatrixXd log_dmu = d_mu.d.array().log();

  auto log_d_alpha = [&](const VectorXd& a) -> MatrixXd {
    return log_dmu + advantage_table(a, r, m) / beta - MatrixXd::Constant(X, Y, 1.0);
  };
  auto dual = [&](const VectorXd& a) {
    MatrixXd ld = log_d_alpha(a);
    return (1.0 - m.gamma) * m.rho.dot(a) + beta * ld.array().exp().sum();
  };
  auto gradient = [&](const MatrixXd& d) {
    OccupancyMeasure occ{d};
    return VectorXd(-flow_residual(occ, m));
  };

  // Start from the constant shift that makes d_alpha sum to one.
  VectorXd alpha = VectorXd::Zero(X);
  if (m.gamma < 1.0) {
    double lse = log_sum_exp(Eigen::Map<const VectorXd>(MatrixXd(log_dmu + r / beta).data(), X * Y));
    alpha.setConstant(beta * (lse - 1.0) / (1.0 - m.gamma));
  }

  RegularizedOccupancySolution sol;
  double g = dual(alpha);
  int it = 0;
  double gnorm = 0.0;
  for (; it < max_iter; ++it) {
    MatrixXd d = log_d_alpha(alpha).array().exp();
    VectorXd grad = gradient(d);
    gnorm = grad.norm();
    if (gnorm <= tol) break;
    MatrixXd H = MatrixXd::Zero(X, X);
    for (int x = 0; x < X; ++x)
      for (int y = 0; y < Y; ++y) {
        int t = m.T(x, y);
        double w = d(x, y) / beta;
        H(x, x) += w;
        H(t, t) += w * m.gamma * m.gamma;
        H(x, t) -= w * m.gamma;
        H(t, x) -= w * m.gamma;
      }
    VectorXd step = -H.ldlt().solve(grad);
    if (!step.allFinite() || grad.dot(step) >= 0) step = -grad;
    double s = 1.0;
    double slope = grad.dot(step);
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      VectorXd cand = alpha + s * step;
      double gc = dual(cand);
      if (std::isfinite(gc) && gc <= g + 1e-4 * s * slope) {
        alpha = cand;
        g = gc;
        moved = true;
        break;
      }
      s *= 0.5;
    }
    if (!moved) {
      // Line search stalled at round-off; accept a full Newton step once more and stop if it does not help.
      VectorXd cand = alpha + step;
      MatrixXd dc = log_d_alpha(cand).array().exp();
      if (gradient(dc).norm() < gnorm) {
        alpha = cand;
        g = dual(cand);
      } else {
        break;
      }
    }
  }
  if (gnorm > tol && gnorm > 1e-6) {
    std::ostringstream os;
    os << "solve_regularized_occupancy: dual did not converge, gradient norm " << gnorm;
    throw NumericalError(os.str());
  }

  sol.dual.alpha = alpha;
  sol.dual.e_alpha = advantage_table(alpha, r, m);
  MatrixXd logits = log_dmu + sol.dual.e_alpha / beta;
  double lz = log_sum_exp(Eigen::Map<const VectorXd>(logits.data(), X * Y));
  sol.dual.log_partition = lz;
  sol.d.d = (logits.array() - lz).exp();
  sol.dual_value = g;
  sol.primal_value = regularized_occupancy_objective(sol.d, r, d_mu, beta);
  sol.iterations = it;
  sol.grad_norm = gnorm;
  return sol;
}

inline double discounted_return(const Trajectory& tau, const MatrixXd& r, double gamma, int H) {
  require(H >= 1, "discounted_return: H must be positive");
  if (static_cast<int>(tau.states.size()) < H || static_cast<int>(tau.actions.size()) < H)
    throw InvalidArgument("discounted_return: trajectory shorter than H");
  double g = 1.0, s = 0.0;
  for (int t = 0; t < H; ++t) {
    s += g * r(tau.states[t], tau.actions[t]);
    g *= gamma;
  }
  return s;
}

struct TelescopingResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double deviation = 0.0;
};

/**
 * Compares the truncated discounted return with the occupancy-ratio form
 *   sum_t gamma^t [beta log(d_star / d_mu) + beta log Z] + alpha(x_0),
 * which drops the tail term gamma^H alpha(x_H).
 */
inline TelescopingResult telescoping_check(const OccupancyMeasure& d_star, const OccupancyMeasure& d_mu,
                                           const DualVariables& dual, double beta, const Trajectory& tau,
                                           const MatrixXd& r, double gamma, int H) {
  TelescopingResult out;
  out.lhs = discounted_return(tau, r, gamma, H);
  double g = 1.0, s = 0.0;
  for (int t = 0; t < H; ++t) {
    int x = tau.states[t], y = tau.actions[t];
    s += g * (beta * std::log(d_star.d(x, y) / d_mu.d(x, y)) + beta * dual.log_partition);
    g *= gamma;
  }
  out.rhs = s + dual.alpha[tau.states[0]];
  out.deviation = std::abs(out.lhs - out.rhs);
  return out;
}

/// Discounted feature expectations E[sum_t gamma^t phi | x_0 = x, pi], one row per state.
inline MatrixXd state_feature_values(const DeterministicMdp& m, const MatrixXd& phi, const TabularPolicy& pi) {
  const int d = static_cast<int>(phi.rows());
  MatrixXd phi_pi = MatrixXd::Zero(m.X, d);
  for (int x = 0; x < m.X; ++x)
    for (int y = 0; y < m.Y; ++y) phi_pi.row(x) += pi.probs(x, y) * phi.col(x * m.Y + y).transpose();
  MatrixXd A = MatrixXd::Identity(m.X, m.X) - m.gamma * transition_matrix(pi, m);
  return Eigen::PartialPivLU<MatrixXd>(A).solve(phi_pi);
}

/// Column (x,y): gamma E[sum gamma^t phi | x_0 = x] - E[sum gamma^t phi | x_0 = x, y_0 = y].
inline MatrixXd phi_pi_matrix(const DeterministicMdp& m, const FeatureSystem& f, const TabularPolicy& pi) {
  MatrixXd FV = state_feature_values(m, f.phi, pi);
  MatrixXd out(f.d_R(), m.X * m.Y);
  for (int x = 0; x < m.X; ++x)
    for (int y = 0; y < m.Y; ++y) {
      int c = x * m.Y + y;
      VectorXd q = f.phi.col(c) + m.gamma * FV.row(m.T(x, y)).transpose();
      out.col(c) = m.gamma * FV.row(x).transpose() - q;
    }
  return out;
}

/// State values V^pi(x) = E[sum_t gamma^t r | x_0 = x].
inline VectorXd state_values(const DeterministicMdp& m, const MatrixXd& r, const TabularPolicy& pi) {
  VectorXd rp(m.X);
  for (int x = 0; x < m.X; ++x) rp[x] = pi.probs.row(x).dot(r.row(x));
  MatrixXd A = MatrixXd::Identity(m.X, m.X) - m.gamma * transition_matrix(pi, m);
  return Eigen::PartialPivLU<MatrixXd>(A).solve(rp);
}

/// Optimal deterministic policy by policy iteration; ties go to the lowest action index.
inline TabularPolicy optimal_policy(const DeterministicMdp& m, const MatrixXd& r) {
  std::vector<int> act(m.X, 0);
  for (int x = 0; x < m.X; ++x) r.row(x).maxCoeff(&act[x]);
  auto to_table = [&] {
    TabularPolicy p;
    p.probs = MatrixXd::Zero(m.X, m.Y);
    for (int x = 0; x < m.X; ++x) p.probs(x, act[x]) = 1.0;
    return p;
  };
  for (int round = 0; round < 10000; ++round) {
    VectorXd V = state_values(m, r, to_table());
    bool changed = false;
    for (int x = 0; x < m.X; ++x) {
      VectorXd q(m.Y);
      for (int y = 0; y < m.Y; ++y) q[y] = r(x, y) + m.gamma * V[m.T(x, y)];
      int best = 0;
      q.maxCoeff(&best);
      double cur = q[act[x]];
      if (best != act[x] && q[best] > cur + 1e-12 * (1.0 + std::abs(cur))) {
        act[x] = best;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return to_table();
}

/// Rolls out pi for H steps from x0.
inline Trajectory rollout(const DeterministicMdp& m, const TabularPolicy& pi, int x0, int H, Rng& rng) {
  Trajectory tau;
  tau.states.reserve(H);
  tau.actions.reserve(H);
  int x = x0;
  for (int t = 0; t < H; ++t) {
    int y = rng.categorical(pi.probs.row(x));
    tau.states.push_back(x);
    tau.actions.push_back(y);
    x = m.T(x, y);
  }
  return tau;
}

}  // namespace prefopt

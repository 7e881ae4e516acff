#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/error.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/rlhf.hpp"

namespace prefopt {

/**
 * DPO loss for a loglinear policy. The argument of the sigmoid for record i is
 * beta * (theta^T psi_bar_i - J_i) with J_i = log mu(yw|x)/mu(yl|x), i.e.
 * beta log(pi(yw)/mu(yw)) - beta log(pi(yl)/mu(yl)).
 */
inline LossGrad dpo_loss_grad(const VectorXd& theta, const PreferenceDataset& data, double beta) {
  const int n = data.size();
  require(n > 0, "dpo_loss_grad: empty dataset");
  require(data.kind == DataKind::bandit, "dpo_loss_grad: bandit dataset required");
  require(data.has_offsets(), "dpo_loss_grad: dataset has no cached offsets J");
  require(theta.size() == data.psi_bar.rows(), "dpo_loss_grad: theta has wrong dimension");
  VectorXd z = beta * (data.psi_bar.transpose() * theta - data.offsets);
  VectorXd w(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    s += softplus(-z[i]);
    w[i] = -sigmoid(-z[i]);
  }
  LossGrad out;
  out.loss = s / n;
  out.grad = (beta / n) * (data.psi_bar * w);
  return out;
}

inline MatrixXd dpo_hessian(const VectorXd& theta, const PreferenceDataset& data, double beta) {
  const int n = data.size();
  VectorXd z = beta * (data.psi_bar.transpose() * theta - data.offsets);
  VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = sigmoid(z[i]) * sigmoid(-z[i]);
  return (beta * beta / n) * (data.psi_bar * w.asDiagonal() * data.psi_bar.transpose());
}

inline double j_max(const PreferenceDataset& data) {
  return data.has_offsets() ? data.offsets.cwiseAbs().maxCoeff() : 0.0;
}

struct DpoLipschitz {
  double L1 = 0.0;  ///< loss Lipschitz bound
  double L2 = 0.0;  ///< gradient Lipschitz bound
};

inline DpoLipschitz dpo_lipschitz(double beta, double B, double J_max) {
  double e = std::exp(2.0 * beta * (B + J_max));
  return {beta * e, beta * beta * e};
}

struct DpoState {
  VectorXd theta_t;
  int t = 0;
  double loss_t = 0.0;
  double grad_norm_t = 0.0;
  double seminorm_gap_t = std::numeric_limits<double>::quiet_NaN();
  double flow_residual_t = std::numeric_limits<double>::quiet_NaN();
};

/// ||a - b||^2 in the seminorm of sigma.
inline double seminorm_sq(const VectorXd& a, const VectorXd& b, const MatrixXd& sigma) {
  VectorXd d = a - b;
  return d.dot(sigma * d);
}

inline MatrixXd feature_covariance(const MatrixXd& diffs) {
  return diffs * diffs.transpose() / static_cast<double>(diffs.cols());
}

/// Projected gradient descent on the DPO loss over the B-ball. Returns iterates 0..T.
inline std::vector<DpoState> dpo_pgd(const PreferenceDataset& data, double B, double beta,
                                     std::optional<double> eta, int T, const VectorXd& theta0,
                                     const std::optional<VectorXd>& reference = std::nullopt) {
  require(B > 0, "dpo_pgd: B must be positive");
  require(T >= 0, "dpo_pgd: T must be nonnegative");
  double step;
  if (eta) {
    step = *eta;
  } else {
    require(beta > 0, "dpo_pgd: default step needs beta > 0");
    step = 1.0 / dpo_lipschitz(beta, B, j_max(data)).L2;
  }
  require(step >= 0, "dpo_pgd: eta must be nonnegative");
  MatrixXd sigma;
  if (reference) sigma = feature_covariance(data.psi_bar);
  std::vector<DpoState> out;
  out.reserve(T + 1);
  VectorXd th = project_ball(theta0, B);
  for (int t = 0; t <= T; ++t) {
    LossGrad lg = dpo_loss_grad(th, data, beta);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
      throw NumericalError("dpo_pgd: non-finite loss at iterate " + std::to_string(t));
    DpoState st;
    st.theta_t = th;
    st.t = t;
    st.loss_t = lg.loss;
    st.grad_norm_t = lg.grad.norm();
    if (reference) st.seminorm_gap_t = seminorm_sq(th, *reference, sigma);
    out.push_back(std::move(st));
    if (t < T) th = project_ball(th - step * lg.grad, B);
  }
  return out;
}

/**
 * Occupancy-space DPO loss on trajectory pairs: argument beta * (theta^T psi_bar'_i + K_i)
 * where K_i is the cached discounted log-ratio of d_mu along the two trajectories.
 */
inline LossGrad dpo_mdp_loss_grad(const VectorXd& theta, const PreferenceDataset& data, double beta) {
  const int n = data.size();
  require(n > 0, "dpo_mdp_loss_grad: empty dataset");
  require(data.kind == DataKind::trajectory, "dpo_mdp_loss_grad: trajectory dataset required");
  if (!data.has_offsets()) throw InvalidArgument("dpo_mdp_loss_grad: missing occupancy offsets K");
  require(theta.size() == data.psi_bar.rows(), "dpo_mdp_loss_grad: theta has wrong dimension");
  VectorXd z = beta * (data.psi_bar.transpose() * theta + data.offsets);
  VectorXd w(n);
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    s += softplus(-z[i]);
    w[i] = -sigmoid(-z[i]);
  }
  LossGrad out;
  out.loss = s / n;
  out.grad = (beta / n) * (data.psi_bar * w);
  return out;
}

/// d_theta(x,y) proportional to exp(theta^T psi'(x,y)), normalised jointly over all pairs.
inline OccupancyMeasure occupancy_from_theta(const VectorXd& theta, const FeatureSystem& f) {
  MatrixXd l = logit_table(theta, f.occ(), f.X, f.Y);
  double lse = log_sum_exp(Eigen::Map<const VectorXd>(l.data(), l.size()));
  return OccupancyMeasure{(l.array() - lse).exp().matrix()};
}

inline std::vector<DpoState> dpo_mdp_pgd(const PreferenceDataset& data, const FeatureSystem& f,
                                         const DeterministicMdp& m, double B_occ, double beta,
                                         std::optional<double> eta, int T, const VectorXd& theta0,
                                         const std::optional<VectorXd>& reference = std::nullopt) {
  require(B_occ > 0, "dpo_mdp_pgd: B' must be positive");
  double step;
  if (eta) {
    step = *eta;
  } else {
    require(beta > 0, "dpo_mdp_pgd: default step needs beta > 0");
    step = 1.0 / dpo_lipschitz(beta, B_occ, j_max(data)).L2;
  }
  MatrixXd sigma;
  if (reference) sigma = feature_covariance(data.psi_bar);
  std::vector<DpoState> out;
  VectorXd th = project_ball(theta0, B_occ);
  for (int t = 0; t <= T; ++t) {
    LossGrad lg = dpo_mdp_loss_grad(th, data, beta);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
      throw NumericalError("dpo_mdp_pgd: non-finite loss at iterate " + std::to_string(t));
    DpoState st;
    st.theta_t = th;
    st.t = t;
    st.loss_t = lg.loss;
    st.grad_norm_t = lg.grad.norm();
    if (reference) st.seminorm_gap_t = seminorm_sq(th, *reference, sigma);
    st.flow_residual_t = flow_residual(occupancy_from_theta(th, f), m).cwiseAbs().maxCoeff();
    out.push_back(std::move(st));
    if (t < T) th = project_ball(th - step * lg.grad, B_occ);
  }
  return out;
}

}  // namespace prefopt

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/domain.hpp"
#include "prefopt/error.hpp"

namespace prefopt {

struct LossGrad {
  double loss = 0.0;
  VectorXd grad;
};

/// Mean logistic loss of omega^T phi_bar and its gradient.
inline LossGrad mle_loss_grad(const VectorXd& omega, const PreferenceDataset& data) {
  const int n = data.size();
  require(n > 0, "mle_loss_grad: empty dataset");
  require(omega.size() == data.phi_bar.rows(), "mle_loss_grad: omega has wrong dimension");
  VectorXd z = data.phi_bar.transpose() * omega;
  LossGrad out;
  out.grad = VectorXd::Zero(omega.size());
  double s = 0.0;
  VectorXd w(n);
  for (int i = 0; i < n; ++i) {
    s += softplus(-z[i]);
    w[i] = -sigmoid(-z[i]);
  }
  out.loss = s / n;
  out.grad = data.phi_bar * w / n;
  return out;
}

inline MatrixXd mle_hessian(const VectorXd& omega, const PreferenceDataset& data) {
  const int n = data.size();
  require(n > 0, "mle_hessian: empty dataset");
  VectorXd z = data.phi_bar.transpose() * omega;
  VectorXd w(n);
  for (int i = 0; i < n; ++i) w[i] = sigmoid(z[i]) * sigmoid(-z[i]);
  return data.phi_bar * w.asDiagonal() * data.phi_bar.transpose() / n;
}

struct MleState {
  VectorXd omega_t;
  int t = 0;
  double loss_t = 0.0;
  double grad_norm_t = 0.0;
};

/// Projected gradient descent on the MLE loss over the F-ball. Returns iterates 0..T.
inline std::vector<MleState> mle_pgd(const PreferenceDataset& data, double F, std::optional<double> eta, int T,
                                     const VectorXd& omega0) {
  require(F > 0, "mle_pgd: F must be positive");
  require(T >= 0, "mle_pgd: T must be nonnegative");
  const double step = eta.value_or(std::exp(-2.0 * F));
  require(step >= 0, "mle_pgd: eta must be nonnegative");
  std::vector<MleState> out;
  out.reserve(T + 1);
  VectorXd w = project_ball(omega0, F);
  for (int t = 0; t <= T; ++t) {
    LossGrad lg = mle_loss_grad(w, data);
    if (!std::isfinite(lg.loss) || !lg.grad.allFinite())
      throw NumericalError("mle_pgd: non-finite loss at iterate " + std::to_string(t));
    out.push_back({w, t, lg.loss, lg.grad.norm()});
    if (t < T) w = project_ball(w - step * lg.grad, F);
  }
  return out;
}

struct GibbsPolicy {
  TabularPolicy policy;
  MatrixXd log_probs;
  VectorXd log_z;  ///< log sum_y mu(y|x) exp(r(x,y)/beta)
};

/// pi(y|x) proportional to mu(y|x) exp(r(x,y)/beta); takes log mu directly.
inline GibbsPolicy gibbs_policy_log(const MatrixXd& r, const MatrixXd& log_mu, double beta) {
  require(beta > 0, "gibbs_policy: beta must be positive");
  require(r.rows() == log_mu.rows() && r.cols() == log_mu.cols(), "gibbs_policy: shape mismatch");
  GibbsPolicy g;
  MatrixXd logits = log_mu + r / beta;
  g.log_z.resize(r.rows());
  g.log_probs.resize(r.rows(), r.cols());
  for (Eigen::Index x = 0; x < r.rows(); ++x) {
    g.log_z[x] = log_sum_exp(logits.row(x));
    g.log_probs.row(x) = logits.row(x).array() - g.log_z[x];
  }
  g.policy.probs = g.log_probs.array().exp();
  for (Eigen::Index x = 0; x < r.rows(); ++x) g.policy.probs.row(x) /= g.policy.probs.row(x).sum();
  return g;
}

inline GibbsPolicy gibbs_policy(const MatrixXd& r, const TabularPolicy& mu, double beta) {
  require(beta > 0, "gibbs_policy: beta must be positive");
  return gibbs_policy_log(r, mu.probs.array().log().matrix(), beta);
}

/// (1/n) sum over dataset contexts of sum_y pi [r - beta log(pi/mu)].
inline double sample_regularized_value(const TabularPolicy& pi, const MatrixXd& r, const PreferenceDataset& data,
                                       double beta, const TabularPolicy& mu) {
  const int n = data.size();
  require(n > 0, "sample_regularized_value: empty dataset");
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    int x = data.context(i);
    for (Eigen::Index y = 0; y < r.cols(); ++y) {
      double p = pi.probs(x, y);
      if (p == 0.0) continue;
      s += p * (r(x, y) - (beta == 0.0 ? 0.0 : beta * std::log(p / mu.probs(x, y))));
    }
  }
  return s / n;
}

/// Contexts of the records, in record order (repeats kept).
inline std::vector<int> dataset_contexts(const PreferenceDataset& data) {
  std::vector<int> c(data.size());
  for (int i = 0; i < data.size(); ++i) c[i] = data.context(i);
  return c;
}

/// Sample objective of the loglinear policy theta and its exact gradient.
inline LossGrad regularized_objective_grad(const VectorXd& theta, const FeatureSystem& f, const MatrixXd& r,
                                           const MatrixXd& log_mu, double beta, const std::vector<int>& contexts) {
  require(!contexts.empty(), "regularized_objective_grad: no contexts");
  const int Y = f.Y;
  LossGrad out;
  out.grad = VectorXd::Zero(theta.size());
  double val = 0.0;
  for (int x : contexts) {
    auto block = f.psi.middleCols(static_cast<Eigen::Index>(x) * Y, Y);
    VectorXd logits = block.transpose() * theta;
    double lse = log_sum_exp(logits);
    VectorXd logp = logits.array() - lse;
    VectorXd p = logp.array().exp();
    VectorXd q(Y);
    for (int y = 0; y < Y; ++y) q[y] = r(x, y) - beta * (logp[y] - log_mu(x, y));
    val += p.dot(q);
    VectorXd mean_psi = block * p;
    for (int y = 0; y < Y; ++y) out.grad += p[y] * q[y] * (block.col(y) - mean_psi);
  }
  out.loss = val / contexts.size();
  out.grad /= static_cast<double>(contexts.size());
  return out;
}

/// Block-diagonal diag(pi) - pi pi^T over the given contexts.
inline MatrixXd h_matrix(const TabularPolicy& pi, const std::vector<int>& contexts) {
  const int Y = pi.Y();
  const int n = static_cast<int>(contexts.size());
  MatrixXd H = MatrixXd::Zero(static_cast<Eigen::Index>(n) * Y, static_cast<Eigen::Index>(n) * Y);
  for (int i = 0; i < n; ++i) {
    VectorXd p = pi.probs.row(contexts[i]).transpose();
    MatrixXd blk = -p * p.transpose();
    blk.diagonal() += p;
    H.block(static_cast<Eigen::Index>(i) * Y, static_cast<Eigen::Index>(i) * Y, Y, Y) = blk;
  }
  return H;
}

inline MatrixXd h_matrix(const TabularPolicy& pi, const PreferenceDataset& data) {
  require(data.kind == DataKind::bandit, "h_matrix: bandit dataset required");
  return h_matrix(pi, dataset_contexts(data));
}

/// KL(p || q) for logit vectors, accurate when the two are close.
inline double kl_from_logits(const VectorXd& lp, const VectorXd& lq) {
  VectorXd p = softmax(lp);
  VectorXd delta = lp - lq;
  double c = p.dot(delta);
  double s = 0.0;
  for (Eigen::Index y = 0; y < delta.size(); ++y) {
    double u = delta[y] - c;
    s += p[y] * (std::expm1(-u) + u);
  }
  return std::max(0.0, std::log1p(s));
}

struct NpgState {
  VectorXd theta_t;
  int t = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double gap = 0.0;        ///< V*(D) - V^{pi_theta}(D)
  VectorXd alpha_t;
  double alpha_norm = 0.0;
  double min_policy_prob = 0.0;
  double theta_norm = 0.0;
};

struct NpgResult {
  std::vector<NpgState> states;
  MatrixXd psi_n;       ///< d_P x nY
  MatrixXd gram_pinv;   ///< (psi_n psi_n^T)^+
  double eta_prime = 0.0;
  bool rank_deficient = false;
  double min_singular_ratio = 0.0;
};

/**
 * Preconditioned ascent theta <- theta + eta' (Psi_n Psi_n^T)^+ grad on the
 * sample objective over the dataset contexts. Gap is measured against the
 * Gibbs policy of r_hat on the same contexts, via beta * mean KL.
 */
inline NpgResult npg_run(const PreferenceDataset& data, const FeatureSystem& f, const MatrixXd& r_hat,
                         const MatrixXd& log_mu, double beta, std::optional<double> eta_prime, int T,
                         const VectorXd& theta0) {
  require(beta > 0, "npg_run: beta must be positive");
  require(T >= 0, "npg_run: T must be nonnegative");
  const int n = data.size();
  require(n > 0, "npg_run: empty dataset");
  const int Y = f.Y;
  std::vector<int> ctx = dataset_contexts(data);

  NpgResult res;
  res.eta_prime = eta_prime.value_or(std::min(static_cast<double>(n) / beta, 1e4));
  res.psi_n.resize(f.d_P(), static_cast<Eigen::Index>(n) * Y);
  for (int i = 0; i < n; ++i)
    res.psi_n.middleCols(static_cast<Eigen::Index>(i) * Y, Y) =
        f.psi.middleCols(static_cast<Eigen::Index>(ctx[i]) * Y, Y);
  Eigen::JacobiSVD<MatrixXd> svd(res.psi_n, Eigen::ComputeThinU);
  const VectorXd& s = svd.singularValues();
  VectorXd inv = VectorXd::Zero(s.size());
  for (Eigen::Index k = 0; k < s.size(); ++k)
    if (s[k] > 1e-10 * s[0]) inv[k] = 1.0 / (s[k] * s[k]);
  res.gram_pinv = svd.matrixU() * inv.asDiagonal() * svd.matrixU().transpose();
  res.min_singular_ratio = s.size() > 0 && s[0] > 0 ? s[s.size() - 1] / s[0] : 0.0;
  res.rank_deficient = res.psi_n.cols() > res.psi_n.rows() || res.min_singular_ratio < 1e-10;

  MatrixXd target_logits = log_mu + r_hat / beta;
  VectorXd base(static_cast<Eigen::Index>(n) * Y);
  for (int i = 0; i < n; ++i)
    for (int y = 0; y < Y; ++y) base[i * Y + y] = r_hat(ctx[i], y) + beta * log_mu(ctx[i], y);

  VectorXd theta = theta0;
  res.states.reserve(T + 1);
  for (int t = 0; t <= T; ++t) {
    LossGrad og = regularized_objective_grad(theta, f, r_hat, log_mu, beta, ctx);
    if (!std::isfinite(og.loss) || !og.grad.allFinite())
      throw NumericalError("npg_run: non-finite objective at iterate " + std::to_string(t));
    NpgState st;
    st.theta_t = theta;
    st.t = t;
    st.objective = og.loss;
    st.grad_norm = og.grad.norm();
    st.theta_norm = theta.norm();
    double gap = 0.0, pmin = 1.0;
    for (int x : ctx) {
      VectorXd lp = f.psi.middleCols(static_cast<Eigen::Index>(x) * Y, Y).transpose() * theta;
      gap += kl_from_logits(lp, target_logits.row(x).transpose());
      pmin = std::min(pmin, softmax(lp).minCoeff());
    }
    st.gap = beta * gap / n;
    st.min_policy_prob = pmin;
    VectorXd v = beta * (res.psi_n.transpose() * theta) - base;
    for (int i = 0; i < n; ++i) v.segment(i * Y, Y).array() -= v.segment(i * Y, Y).mean();
    st.alpha_t = v;
    st.alpha_norm = v.norm();
    res.states.push_back(std::move(st));
    if (t < T) theta = theta + res.eta_prime * (res.gram_pinv * og.grad);
  }
  return res;
}

}  // namespace prefopt

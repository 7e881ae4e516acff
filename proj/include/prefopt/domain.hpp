#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "prefopt/error.hpp"

namespace prefopt {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Feature matrices of an instance; column x*Y + y holds the features of (x, y).
struct FeatureSystem {
  int X = 0;
  int Y = 0;
  MatrixXd phi;                    ///< d_R x XY reward features
  MatrixXd psi;                    ///< d_P x XY policy features
  std::optional<MatrixXd> psi_occ; ///< d_M x XY occupancy features

  int index(int x, int y) const {
    if (x < 0 || x >= X || y < 0 || y >= Y)
      throw std::out_of_range("feature index (" + std::to_string(x) + "," + std::to_string(y) + ") out of range");
    return x * Y + y;
  }
  int d_R() const { return static_cast<int>(phi.rows()); }
  int d_P() const { return static_cast<int>(psi.rows()); }
  int d_M() const { return psi_occ ? static_cast<int>(psi_occ->rows()) : 0; }
  const MatrixXd& occ() const {
    if (!psi_occ) throw InvalidArgument("feature system has no occupancy features");
    return *psi_occ;
  }

  void validate(double tol = 1e-12) const {
    require(X > 0 && Y > 0, "FeatureSystem: X and Y must be positive");
    auto check = [&](const MatrixXd& m, const char* name) {
      require(m.cols() == static_cast<Eigen::Index>(X) * Y,
              std::string("FeatureSystem: ") + name + " must have X*Y columns");
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        require(m.col(j).norm() <= 1.0 + tol, std::string("FeatureSystem: ") + name + " column norm exceeds 1");
    };
    check(phi, "phi");
    check(psi, "psi");
    if (psi_occ) check(*psi_occ, "psi_occ");
  }
};

struct LinearReward {
  VectorXd omega;
  double F = 1.0;
};

struct LoglinearPolicy {
  VectorXd theta;
  double B = 1.0;
};

/// X x Y row-stochastic matrix.
struct TabularPolicy {
  MatrixXd probs;

  int X() const { return static_cast<int>(probs.rows()); }
  int Y() const { return static_cast<int>(probs.cols()); }
  double operator()(int x, int y) const { return probs(x, y); }

  void validate(double tol = 1e-12) const {
    for (Eigen::Index x = 0; x < probs.rows(); ++x) {
      require((probs.row(x).array() >= 0.0).all(), "TabularPolicy: negative probability");
      require(std::abs(probs.row(x).sum() - 1.0) <= tol, "TabularPolicy: row does not sum to 1");
    }
  }
};

enum class DataKind { bandit, trajectory };

struct PairRecord {
  int x = 0;
  int yw = 0;
  int yl = 0;
  bool first_won = true;  ///< whether the first-drawn candidate was preferred
};

/// One rolled-out trajectory: states[t], actions[t] for t < H.
struct Trajectory {
  std::vector<int> states;
  std::vector<int> actions;
};

struct TrajectoryRecord {
  int x0 = 0;
  Trajectory w;
  Trajectory l;
  bool first_won = true;
};

/**
 * Preference data with cached feature differences. Column i of phi_bar / psi_bar
 * belongs to record i. For trajectory data the caches hold discounted sums and
 * psi_bar uses the occupancy features.
 */
struct PreferenceDataset {
  DataKind kind = DataKind::bandit;
  std::vector<PairRecord> pairs;
  std::vector<TrajectoryRecord> trajectories;
  MatrixXd phi_bar;
  MatrixXd psi_bar;
  VectorXd offsets;  ///< J = log mu(yw)/mu(yl) (bandit) or K (trajectory); empty if not cached
  double gamma = 0.0;
  int horizon = 1;

  int size() const {
    return static_cast<int>(kind == DataKind::bandit ? pairs.size() : trajectories.size());
  }
  bool has_offsets() const { return offsets.size() == size() && size() > 0; }

  /// Context of record i.
  int context(int i) const { return kind == DataKind::bandit ? pairs[i].x : trajectories[i].x0; }

  PreferenceDataset subset(const std::vector<int>& idx) const {
    PreferenceDataset out;
    out.kind = kind;
    out.gamma = gamma;
    out.horizon = horizon;
    out.phi_bar.resize(phi_bar.rows(), static_cast<Eigen::Index>(idx.size()));
    out.psi_bar.resize(psi_bar.rows(), static_cast<Eigen::Index>(idx.size()));
    if (has_offsets()) out.offsets.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      int i = idx[k];
      require(i >= 0 && i < size(), "subset index out of range");
      if (kind == DataKind::bandit)
        out.pairs.push_back(pairs[i]);
      else
        out.trajectories.push_back(trajectories[i]);
      out.phi_bar.col(k) = phi_bar.col(i);
      out.psi_bar.col(k) = psi_bar.col(i);
      if (has_offsets()) out.offsets[k] = offsets[i];
    }
    return out;
  }
};

// ---------------------------------------------------------------------------

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) {
  if (z > 0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

template <class Vec>
double log_sum_exp(const Vec& v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline double reward_eval(const LinearReward& r, const FeatureSystem& f, int x, int y) {
  require(r.omega.size() == f.d_R(), "reward_eval: omega has wrong dimension");
  return r.omega.dot(f.phi.col(f.index(x, y)));
}

/// X x Y table of r(x, y).
inline MatrixXd reward_table(const LinearReward& r, const FeatureSystem& f) {
  require(r.omega.size() == f.d_R(), "reward_table: omega has wrong dimension");
  VectorXd flat = f.phi.transpose() * r.omega;
  return Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(flat.data(), f.X, f.Y);
}

/// X x Y table of theta^T feat(x, y) for an arbitrary feature matrix.
inline MatrixXd logit_table(const VectorXd& theta, const MatrixXd& feat, int X, int Y) {
  require(theta.size() == feat.rows(), "logit_table: theta has wrong dimension");
  VectorXd flat = feat.transpose() * theta;
  return Eigen::Map<const Eigen::Matrix<double, -1, -1, Eigen::RowMajor>>(flat.data(), X, Y);
}

inline VectorXd softmax(const VectorXd& logits) {
  VectorXd p = (logits.array() - logits.maxCoeff()).exp();
  return p / p.sum();
}

inline VectorXd policy_probs(const LoglinearPolicy& pol, const FeatureSystem& f, int x) {
  require(pol.theta.size() == f.d_P(), "policy_probs: theta has wrong dimension");
  f.index(x, 0);
  VectorXd logits = f.psi.middleCols(static_cast<Eigen::Index>(x) * f.Y, f.Y).transpose() * pol.theta;
  return softmax(logits);
}

inline TabularPolicy tabulate(const LoglinearPolicy& pol, const FeatureSystem& f) {
  TabularPolicy t;
  t.probs.resize(f.X, f.Y);
  for (int x = 0; x < f.X; ++x) t.probs.row(x) = policy_probs(pol, f, x).transpose();
  return t;
}

/// Row-wise log-probabilities of a loglinear policy, computed from logits.
inline MatrixXd log_policy_table(const VectorXd& theta, const FeatureSystem& f) {
  MatrixXd l = logit_table(theta, f.psi, f.X, f.Y);
  for (int x = 0; x < f.X; ++x) l.row(x).array() -= log_sum_exp(l.row(x));
  return l;
}

inline double bt_prob(double r_w, double r_l) { return sigmoid(r_w - r_l); }

/**
 * Euclidean projection onto the closed ball of the given radius. The result is
 * nudged inward when rounding leaves it a hair outside, so the map is
 * idempotent bit for bit.
 */
inline VectorXd project_ball(const VectorXd& v, double radius) {
  require(radius > 0, "project_ball: radius must be positive");
  if (std::isinf(radius)) return v;
  double n = v.norm();
  if (n <= radius) return v;
  VectorXd w = v * (radius / n);
  while (w.norm() > radius) w *= (1.0 - std::numeric_limits<double>::epsilon());
  return w;
}

inline VectorXd uniform_rho(int X) { return VectorXd::Constant(X, 1.0 / X); }

/// sum_x rho(x) KL(p(.|x) || q(.|x)).
inline double kl_policies(const TabularPolicy& p, const TabularPolicy& q, const VectorXd& rho) {
  require(p.probs.rows() == q.probs.rows() && p.probs.cols() == q.probs.cols(), "kl_policies: shape mismatch");
  require(rho.size() == p.probs.rows(), "kl_policies: rho has wrong length");
  double total = 0.0;
  for (Eigen::Index x = 0; x < p.probs.rows(); ++x) {
    if (rho[x] == 0.0) continue;
    double s = 0.0;
    for (Eigen::Index y = 0; y < p.probs.cols(); ++y) {
      double pv = p.probs(x, y);
      if (pv == 0.0) continue;
      double qv = q.probs(x, y);
      if (qv <= 0.0)
        throw NumericalError("kl_policies: divergence undefined at (" + std::to_string(x) + "," +
                             std::to_string(y) + ")");
      s += pv * std::log(pv / qv);
    }
    total += rho[x] * s;
  }
  return total;
}

struct Values {
  double V = 0.0;
  double V_reg = 0.0;
};

/// Population value and KL-regularised value of a tabular policy against a reward table.
inline Values values(const TabularPolicy& pi, const MatrixXd& r, const VectorXd& rho, double beta,
                     const TabularPolicy& mu) {
  require(r.rows() == pi.probs.rows() && r.cols() == pi.probs.cols(), "values: reward table shape mismatch");
  require(beta >= 0, "values: beta must be nonnegative");
  double V = 0.0;
  for (Eigen::Index x = 0; x < r.rows(); ++x) V += rho[x] * pi.probs.row(x).dot(r.row(x));
  Values out;
  out.V = V;
  out.V_reg = beta == 0.0 ? V : V - beta * kl_policies(pi, mu, rho);
  return out;
}

inline Values values(const TabularPolicy& pi, const LinearReward& r, const FeatureSystem& f, const VectorXd& rho,
                     double beta, const TabularPolicy& mu) {
  return values(pi, reward_table(r, f), rho, beta, mu);
}

}  // namespace prefopt

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "prefopt/domain.hpp"
#include "prefopt/envgen.hpp"
#include "prefopt/error.hpp"
#include "prefopt/mdp.hpp"

namespace prefopt {

using json = nlohmann::json;

// ---------------------------------------------------------------- matrices

inline json to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline json to_json(const VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline MatrixXd matrix_from_json(const json& j) {
  const Eigen::Index r = static_cast<Eigen::Index>(j.size());
  const Eigen::Index c = r > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    require(static_cast<Eigen::Index>(j[i].size()) == c, "matrix_from_json: ragged rows");
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

inline VectorXd vector_from_json(const json& j) {
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

// ---------------------------------------------------------------- configs

inline json to_json(const InstanceConfig& c) {
  return json{{"X", c.X},
              {"Y", c.Y},
              {"d_R", c.d_R},
              {"d_P", c.d_P},
              {"d_M", c.d_M},
              {"F", c.F},
              {"B", c.B},
              {"B_occ", c.B_occ},
              {"beta", c.beta},
              {"realizable", c.realizable},
              {"epsilon_app", c.epsilon_app},
              {"feature_mode", to_string(c.feature_mode)},
              {"seed", c.seed},
              {"mu_norm", c.mu_norm},
              {"gamma", c.gamma},
              {"tail_tol", c.tail_tol}};
}

/// Reads the keys present in j on top of `c`; unknown keys are rejected.
inline InstanceConfig instance_config_from_json(const json& j, InstanceConfig c = {}) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "X") c.X = v.get<int>();
    else if (k == "Y") c.Y = v.get<int>();
    else if (k == "d_R") c.d_R = v.get<int>();
    else if (k == "d_P") c.d_P = v.get<int>();
    else if (k == "d_M") c.d_M = v.get<int>();
    else if (k == "F") c.F = v.get<double>();
    else if (k == "B") c.B = v.get<double>();
    else if (k == "B_occ") c.B_occ = v.get<double>();
    else if (k == "beta") c.beta = v.get<double>();
    else if (k == "realizable") c.realizable = v.get<bool>();
    else if (k == "epsilon_app") c.epsilon_app = v.get<double>();
    else if (k == "feature_mode") c.feature_mode = feature_mode_from_string(v.get<std::string>());
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "mu_norm") c.mu_norm = v.get<double>();
    else if (k == "gamma") c.gamma = v.get<double>();
    else if (k == "tail_tol") c.tail_tol = v.get<double>();
    else throw InvalidArgument("instance config: unknown key '" + k + "'");
  }
  return c;
}

// ---------------------------------------------------------------- instances

inline json to_json(const FeatureSystem& f) {
  json j{{"X", f.X}, {"Y", f.Y}, {"phi", to_json(f.phi)}, {"psi", to_json(f.psi)}};
  if (f.psi_occ) j["psi_occ"] = to_json(*f.psi_occ);
  return j;
}

inline json to_json(const BanditInstance& inst) {
  return json{{"config", to_json(inst.config)},
              {"features", to_json(inst.features)},
              {"true_reward", to_json(inst.true_reward)},
              {"omega", to_json(inst.reward_fit.omega)},
              {"theta_mu", to_json(inst.mu.theta)},
              {"mu", to_json(inst.mu_table.probs)},
              {"log_mu", to_json(inst.log_mu)},
              {"rho", to_json(inst.rho)},
              {"realizable", inst.realizable},
              {"epsilon_measured", inst.epsilon_measured}};
}

inline json to_json(const OccupancyMeasure& d) { return to_json(d.d); }

inline json to_json(const DualVariables& dv) {
  return json{{"alpha", to_json(dv.alpha)}, {"e_alpha", to_json(dv.e_alpha)}, {"log_partition", dv.log_partition}};
}

inline json to_json(const MdpInstance& inst) {
  json next = json::array();
  for (int s : inst.mdp.next) next.push_back(s);
  return json{{"config", to_json(inst.config)},
              {"next", next},
              {"gamma", inst.mdp.gamma},
              {"horizon", inst.mdp.horizon},
              {"rho", to_json(inst.mdp.rho)},
              {"features", to_json(inst.features)},
              {"true_reward", to_json(inst.true_reward)},
              {"omega", to_json(inst.reward.omega)},
              {"theta_mu", to_json(inst.mu.theta)},
              {"mu", to_json(inst.mu_table.probs)},
              {"d_mu", to_json(inst.d_mu)},
              {"theta_mu_occ", to_json(inst.theta_mu_occ)},
              {"theta_mu_occ_residual", inst.theta_mu_occ_residual}};
}

inline json to_json(const PreferenceDataset& d) {
  json j;
  j["kind"] = d.kind == DataKind::bandit ? "bandit" : "trajectory";
  j["n"] = d.size();
  if (d.kind == DataKind::bandit) {
    json pairs = json::array();
    for (const PairRecord& p : d.pairs)
      pairs.push_back(json{{"x", p.x}, {"yw", p.yw}, {"yl", p.yl}, {"first_won", p.first_won}});
    j["pairs"] = pairs;
  } else {
    json trs = json::array();
    for (const TrajectoryRecord& t : d.trajectories)
      trs.push_back(json{{"x0", t.x0},
                         {"w_states", t.w.states},
                         {"w_actions", t.w.actions},
                         {"l_states", t.l.states},
                         {"l_actions", t.l.actions},
                         {"first_won", t.first_won}});
    j["trajectories"] = trs;
    j["gamma"] = d.gamma;
    j["horizon"] = d.horizon;
  }
  j["phi_bar"] = to_json(d.phi_bar);
  j["psi_bar"] = to_json(d.psi_bar);
  j["offsets"] = to_json(d.offsets);
  return j;
}

// ---------------------------------------------------------------- readers

inline FeatureSystem feature_system_from_json(const json& j) {
  FeatureSystem f;
  f.X = j.at("X").get<int>();
  f.Y = j.at("Y").get<int>();
  f.phi = matrix_from_json(j.at("phi"));
  f.psi = matrix_from_json(j.at("psi"));
  if (j.contains("psi_occ")) f.psi_occ = matrix_from_json(j.at("psi_occ"));
  return f;
}

inline BanditInstance bandit_instance_from_json(const json& j) {
  BanditInstance inst;
  inst.config = instance_config_from_json(j.at("config"));
  inst.features = feature_system_from_json(j.at("features"));
  inst.true_reward = matrix_from_json(j.at("true_reward"));
  inst.reward_fit = LinearReward{vector_from_json(j.at("omega")), inst.config.F};
  inst.mu = LoglinearPolicy{vector_from_json(j.at("theta_mu")), inst.config.B};
  inst.mu_table.probs = matrix_from_json(j.at("mu"));
  inst.log_mu = matrix_from_json(j.at("log_mu"));
  inst.rho = vector_from_json(j.at("rho"));
  inst.realizable = j.at("realizable").get<bool>();
  inst.epsilon_measured = j.at("epsilon_measured").get<double>();
  return inst;
}

inline MdpInstance mdp_instance_from_json(const json& j) {
  MdpInstance inst;
  inst.config = instance_config_from_json(j.at("config"));
  inst.features = feature_system_from_json(j.at("features"));
  DeterministicMdp& m = inst.mdp;
  m.X = inst.features.X;
  m.Y = inst.features.Y;
  m.next = j.at("next").get<std::vector<int>>();
  m.gamma = j.at("gamma").get<double>();
  m.horizon = j.at("horizon").get<int>();
  m.rho = vector_from_json(j.at("rho"));
  m.validate();
  inst.true_reward = matrix_from_json(j.at("true_reward"));
  inst.reward = LinearReward{vector_from_json(j.at("omega")), inst.config.F};
  inst.mu = LoglinearPolicy{vector_from_json(j.at("theta_mu")), inst.config.B};
  inst.mu_table.probs = matrix_from_json(j.at("mu"));
  inst.d_mu.d = matrix_from_json(j.at("d_mu"));
  inst.theta_mu_occ = vector_from_json(j.at("theta_mu_occ"));
  inst.theta_mu_occ_residual = j.at("theta_mu_occ_residual").get<double>();
  return inst;
}

inline PreferenceDataset dataset_from_json(const json& j) {
  PreferenceDataset d;
  const std::string kind = j.at("kind").get<std::string>();
  require(kind == "bandit" || kind == "trajectory", "dataset: unknown kind '" + kind + "'");
  d.kind = kind == "bandit" ? DataKind::bandit : DataKind::trajectory;
  if (d.kind == DataKind::bandit) {
    for (const json& p : j.at("pairs"))
      d.pairs.push_back(PairRecord{p.at("x").get<int>(), p.at("yw").get<int>(), p.at("yl").get<int>(),
                                   p.at("first_won").get<bool>()});
  } else {
    d.gamma = j.at("gamma").get<double>();
    d.horizon = j.at("horizon").get<int>();
    for (const json& t : j.at("trajectories")) {
      TrajectoryRecord r;
      r.x0 = t.at("x0").get<int>();
      r.w.states = t.at("w_states").get<std::vector<int>>();
      r.w.actions = t.at("w_actions").get<std::vector<int>>();
      r.l.states = t.at("l_states").get<std::vector<int>>();
      r.l.actions = t.at("l_actions").get<std::vector<int>>();
      r.first_won = t.at("first_won").get<bool>();
      d.trajectories.push_back(std::move(r));
    }
  }
  d.phi_bar = matrix_from_json(j.at("phi_bar"));
  d.psi_bar = matrix_from_json(j.at("psi_bar"));
  d.offsets = vector_from_json(j.at("offsets"));
  require(d.phi_bar.cols() == d.size() && d.psi_bar.cols() == d.size(), "dataset: cache width mismatch");
  return d;
}

// ---------------------------------------------------------------- hashing

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string json_hash(const json& j) { return hex64(fnv1a(j.dump())); }

// ---------------------------------------------------------------- CSV

/// 17 significant digits; nan and inf spelled out.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string csv_line(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += csv_quote(fields[i]);
  }
  return line;
}

/// RFC-4180 reader: quoted fields may contain commas, quotes and newlines.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw InvalidArgument("parse_csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write '" + path + "'");
  out << content;
}

}  // namespace prefopt

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "prefopt/domain.hpp"
#include "prefopt/dpo.hpp"
#include "prefopt/envgen.hpp"
#include "prefopt/error.hpp"
#include "prefopt/mdp.hpp"
#include "prefopt/metrics.hpp"
#include "prefopt/rlhf.hpp"
#include "prefopt/rng.hpp"
#include "prefopt/serialize.hpp"

namespace prefopt {

inline constexpr const char* kLibraryVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

enum class Paradigm { rlhf, dpo, both };
enum class Setting { bandit, mdp };

inline const char* to_string(Paradigm p) { return p == Paradigm::rlhf ? "rlhf" : p == Paradigm::dpo ? "dpo" : "both"; }
inline const char* to_string(Setting s) { return s == Setting::bandit ? "bandit" : "mdp"; }

inline Paradigm paradigm_from_string(const std::string& s) {
  if (s == "rlhf") return Paradigm::rlhf;
  if (s == "dpo") return Paradigm::dpo;
  if (s == "both") return Paradigm::both;
  throw InvalidArgument("unknown paradigm '" + s + "'");
}

inline Setting setting_from_string(const std::string& s) {
  if (s == "bandit") return Setting::bandit;
  if (s == "mdp") return Setting::mdp;
  throw InvalidArgument("unknown setting '" + s + "'");
}

/// DPO temperature: a fixed value, or c * sqrt(d_P / n).
struct BetaPolicy {
  enum class Kind { fixed, sqrt_rule } kind = Kind::fixed;
  double value = 1.0;
  double c = 1.0;

  double at(int n, int d_P) const {
    return kind == Kind::fixed ? value : c * std::sqrt(static_cast<double>(d_P) / n);
  }
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  InstanceConfig instance;
  Paradigm paradigm = Paradigm::both;
  Setting setting = Setting::bandit;
  std::vector<int> n_grid{256};
  BetaPolicy beta_policy;
  std::optional<double> beta_rlhf;  ///< defaults to instance.beta
  std::vector<std::uint64_t> seeds{0};
  std::string solver = "oracle";  ///< oracle | pgd
  int max_iters = 2000;           ///< pgd budget
  double row_budget_s = 120.0;
  SplitMode split = SplitMode::interleave;
  std::string output = "results.csv";

  double rlhf_beta() const { return beta_rlhf.value_or(instance.beta); }

  void validate() const {
    require(schema_version == kSchemaVersion, "config: unsupported schema_version " + std::to_string(schema_version));
    instance.validate();
    require(!n_grid.empty(), "config: n_grid must be nonempty");
    require(!seeds.empty(), "config: seeds must be nonempty");
    for (int n : n_grid) require(n >= 2, "config: dataset sizes must be at least 2");
    std::set<std::uint64_t> s(seeds.begin(), seeds.end());
    require(s.size() == seeds.size(), "config: seeds must be distinct");
    require(solver == "oracle" || solver == "pgd", "config: solver must be oracle or pgd");
    require(max_iters >= 0, "config: max_iters must be nonnegative");
    require(row_budget_s > 0, "config: row_budget_s must be positive");
    require(rlhf_beta() > 0, "config: beta_rlhf must be positive");
    if (beta_policy.kind == BetaPolicy::Kind::fixed) require(beta_policy.value >= 0, "config: beta must be nonnegative");
    else require(beta_policy.c > 0, "config: sqrt_rule needs c > 0");
    if (setting == Setting::mdp) require(instance.d_M > 0, "config: mdp setting needs instance.d_M > 0");
  }
};

inline json to_json(const ExperimentConfig& c) {
  json bp = c.beta_policy.kind == BetaPolicy::Kind::fixed ? json{{"kind", "fixed"}, {"value", c.beta_policy.value}}
                                                          : json{{"kind", "sqrt_rule"}, {"c", c.beta_policy.c}};
  json j{{"schema_version", c.schema_version},
         {"instance", to_json(c.instance)},
         {"paradigm", to_string(c.paradigm)},
         {"setting", to_string(c.setting)},
         {"n_grid", c.n_grid},
         {"beta_policy", bp},
         {"seeds", c.seeds},
         {"solver", c.solver},
         {"max_iters", c.max_iters},
         {"row_budget_s", c.row_budget_s},
         {"split", c.split == SplitMode::interleave ? "interleave" : "reuse"},
         {"output", c.output}};
  if (c.beta_rlhf) j["beta_rlhf"] = *c.beta_rlhf;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  require(j.is_object(), "config: top level must be an object");
  require(j.contains("schema_version"), "config: missing schema_version");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "schema_version") c.schema_version = v.get<int>();
    else if (k == "instance") c.instance = instance_config_from_json(v);
    else if (k == "paradigm") c.paradigm = paradigm_from_string(v.get<std::string>());
    else if (k == "setting") c.setting = setting_from_string(v.get<std::string>());
    else if (k == "n_grid") c.n_grid = v.get<std::vector<int>>();
    else if (k == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
    else if (k == "beta_rlhf") c.beta_rlhf = v.get<double>();
    else if (k == "solver") c.solver = v.get<std::string>();
    else if (k == "max_iters") c.max_iters = v.get<int>();
    else if (k == "row_budget_s") c.row_budget_s = v.get<double>();
    else if (k == "output") c.output = v.get<std::string>();
    else if (k == "split") {
      std::string s = v.get<std::string>();
      require(s == "interleave" || s == "reuse", "config: split must be interleave or reuse");
      c.split = s == "reuse" ? SplitMode::reuse : SplitMode::interleave;
    } else if (k == "beta_policy") {
      std::string kind = v.at("kind").get<std::string>();
      if (kind == "fixed") {
        c.beta_policy.kind = BetaPolicy::Kind::fixed;
        c.beta_policy.value = v.value("value", 1.0);
      } else if (kind == "sqrt_rule") {
        c.beta_policy.kind = BetaPolicy::Kind::sqrt_rule;
        c.beta_policy.c = v.value("c", 1.0);
      } else {
        throw InvalidArgument("config: beta_policy.kind must be fixed or sqrt_rule");
      }
    } else {
      throw InvalidArgument("config: unknown key '" + k + "'");
    }
  }
  return c;
}

inline std::string config_hash(const ExperimentConfig& c) { return json_hash(to_json(c)); }

// ---------------------------------------------------------------- rows

struct ResultRow {
  int schema_version = kSchemaVersion;
  std::string run_id;
  std::uint64_t seed = 0;
  std::string paradigm, setting;
  int n = 0, d_R = 0, d_P = 0, d_M = 0;
  double beta = 0.0, lambda = 0.0;
  double G = NAN, G_reg = NAN, D = NAN;
  double Lambda_R = NAN, Lambda_P = NAN;
  double final_loss = NAN, final_grad_norm = NAN;
  long iters = 0;
  double wall_ms = 0.0;
  double flow_residual = NAN;
  std::string warn_flags;
  std::string instance_hash;
  std::string error;

  bool failed() const { return !error.empty(); }

  static std::vector<std::string> header() {
    return {"schema_version", "run_id",   "seed",       "paradigm",   "setting",         "n",
            "d_R",            "d_P",      "d_M",        "beta",       "lambda",          "G",
            "G_reg",          "D",        "Lambda_R",   "Lambda_P",   "final_loss",      "final_grad_norm",
            "iters",          "wall_ms",  "flow_residual", "warn_flags", "instance_hash", "error"};
  }

  std::vector<std::string> fields() const {
    return {std::to_string(schema_version), run_id, std::to_string(seed), paradigm, setting, std::to_string(n),
            std::to_string(d_R), std::to_string(d_P), std::to_string(d_M), format_double(beta),
            format_double(lambda), format_double(G), format_double(G_reg), format_double(D),
            format_double(Lambda_R), format_double(Lambda_P), format_double(final_loss),
            format_double(final_grad_norm), std::to_string(iters), format_double(wall_ms),
            format_double(flow_residual), warn_flags, instance_hash, error};
  }

  /// Every field except the wall clock, for determinism comparisons.
  std::vector<std::string> stable_fields() const {
    auto f = fields();
    f.erase(f.begin() + 19);
    return f;
  }

  static ResultRow from_map(const std::map<std::string, std::string>& m) {
    auto get = [&](const char* k) -> std::string {
      auto it = m.find(k);
      return it == m.end() ? std::string() : it->second;
    };
    auto num = [&](const char* k) {
      std::string s = get(k);
      return s.empty() ? NAN : std::strtod(s.c_str(), nullptr);
    };
    ResultRow r;
    r.schema_version = std::atoi(get("schema_version").c_str());
    r.run_id = get("run_id");
    r.seed = std::strtoull(get("seed").c_str(), nullptr, 10);
    r.paradigm = get("paradigm");
    r.setting = get("setting");
    r.n = std::atoi(get("n").c_str());
    r.d_R = std::atoi(get("d_R").c_str());
    r.d_P = std::atoi(get("d_P").c_str());
    r.d_M = std::atoi(get("d_M").c_str());
    r.beta = num("beta");
    r.lambda = num("lambda");
    r.G = num("G");
    r.G_reg = num("G_reg");
    r.D = num("D");
    r.Lambda_R = num("Lambda_R");
    r.Lambda_P = num("Lambda_P");
    r.final_loss = num("final_loss");
    r.final_grad_norm = num("final_grad_norm");
    r.iters = std::atol(get("iters").c_str());
    r.wall_ms = num("wall_ms");
    r.flow_residual = num("flow_residual");
    r.warn_flags = get("warn_flags");
    r.instance_hash = get("instance_hash");
    r.error = get("error");
    return r;
  }
};

inline std::vector<ResultRow> read_rows(const std::string& csv_text) {
  auto table = parse_csv(csv_text);
  require(!table.empty(), "read_rows: CSV has no header");
  const auto& head = table[0];
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < table.size(); ++i) {
    std::map<std::string, std::string> m;
    for (std::size_t k = 0; k < head.size() && k < table[i].size(); ++k) m[head[k]] = table[i][k];
    rows.push_back(ResultRow::from_map(m));
  }
  return rows;
}

// ---------------------------------------------------------------- single runs

/// Instance seed for a run: mixes the configured instance seed with the run seed.
inline std::uint64_t run_instance_seed(std::uint64_t instance_seed, std::uint64_t seed) {
  return Rng(instance_seed).derive(seed).derive("instance").next_u64();
}

inline std::uint64_t run_data_seed(std::uint64_t instance_seed, std::uint64_t seed, int n) {
  return Rng(instance_seed).derive(seed).derive("data").derive(static_cast<std::uint64_t>(n)).next_u64();
}

namespace detail {

inline void add_flag(std::string& flags, const std::string& f) {
  if (!flags.empty()) flags += ';';
  flags += f;
}

struct FitOutcome {
  VectorXd param;
  double loss = NAN, grad_norm = NAN;
  long iters = 0;
  bool warn = false;
  bool degenerate = false;
};

inline FitOutcome fit(LossKind kind, const PreferenceDataset& data, double cap, double beta,
                      const ExperimentConfig& cfg) {
  FitOutcome out;
  const Eigen::Index d = kind == LossKind::mle ? data.phi_bar.rows() : data.psi_bar.rows();
  if (cfg.solver == "pgd" && kind != LossKind::dpo_mdp) {
    if (kind == LossKind::mle) {
      auto tr = mle_pgd(data, cap, std::nullopt, cfg.max_iters, VectorXd::Zero(d));
      out.param = tr.back().omega_t;
      out.loss = tr.back().loss_t;
      out.grad_norm = tr.back().grad_norm_t;
    } else {
      if (beta == 0.0) {
        out.param = VectorXd::Zero(d);
        out.degenerate = true;
        return out;
      }
      auto tr = dpo_pgd(data, cap, beta, std::nullopt, cfg.max_iters, VectorXd::Zero(d));
      out.param = tr.back().theta_t;
      out.loss = tr.back().loss_t;
      out.grad_norm = tr.back().grad_norm_t;
    }
    out.iters = cfg.max_iters;
    return out;
  }
  OracleParams p;
  p.cap = cap;
  p.beta = beta;
  OracleResult r = oracle_solve(kind, data, p);
  out.param = r.param;
  out.loss = r.loss;
  out.grad_norm = r.grad_norm;
  out.iters = r.iterations;
  out.warn = r.precision_warning;
  out.degenerate = r.degenerate;
  return out;
}

inline std::string instance_hash(const json& inst) { return json_hash(inst); }

}  // namespace detail

/**
 * One (config point, paradigm, seed) run. `paradigm` must be rlhf or dpo.
 * Errors are caught and reported in the row's error field.
 */
inline ResultRow run_single(const ExperimentConfig& cfg, Paradigm paradigm, int n, std::uint64_t seed) {
  require(paradigm != Paradigm::both, "run_single: paradigm must be rlhf or dpo");
  auto t0 = std::chrono::steady_clock::now();
  ResultRow row;
  row.seed = seed;
  row.paradigm = to_string(paradigm);
  row.setting = to_string(cfg.setting);
  row.n = n;
  row.d_R = cfg.instance.d_R;
  row.d_P = cfg.instance.d_P;
  row.d_M = cfg.setting == Setting::mdp ? cfg.instance.d_M : 0;
  row.lambda = 1.0 / n;
  row.beta = paradigm == Paradigm::rlhf ? cfg.rlhf_beta() : cfg.beta_policy.at(n, cfg.instance.d_P);
  row.run_id = config_hash(cfg).substr(0, 8) + "/" + row.paradigm + "/" + row.setting + "/n" + std::to_string(n) +
               "/s" + std::to_string(seed);
  try {
    InstanceConfig ic = cfg.instance;
    ic.seed = run_instance_seed(cfg.instance.seed, seed);
    const std::uint64_t ds = run_data_seed(cfg.instance.seed, seed, n);
    GapReport gap;
    detail::FitOutcome fo;
    if (cfg.setting == Setting::bandit) {
      BanditInstance inst = make_bandit_instance(ic);
      row.instance_hash = detail::instance_hash(to_json(inst));
      PreferenceDataset data = sample_preferences(inst, n, ds);
      CoveringStats cov = covering_stats(data);
      row.Lambda_R = cov.Lambda_R;
      row.Lambda_P = cov.Lambda_P;
      TabularPolicy pi;
      if (paradigm == Paradigm::rlhf) {
        auto [reward_data, policy_data] = split_dataset(data, cfg.split);
        (void)policy_data;
        fo = detail::fit(LossKind::mle, reward_data, ic.F, 0.0, cfg);
        MatrixXd r_hat = reward_table(LinearReward{fo.param, ic.F}, inst.features);
        pi = gibbs_policy_log(r_hat, inst.log_mu, row.beta).policy;
      } else {
        fo = detail::fit(LossKind::dpo, data, ic.B, row.beta, cfg);
        pi = tabulate(LoglinearPolicy{fo.param, ic.B}, inst.features);
      }
      // G_reg is only meaningful at a positive temperature.
      gap = gap_report(pi, inst, row.beta > 0 ? row.beta : 1.0);
    } else {
      MdpInstance inst = make_mdp_instance(ic);
      row.instance_hash = detail::instance_hash(to_json(inst));
      PreferenceDataset data = sample_trajectory_preferences(inst, n, ds);
      CoveringStats cov = covering_stats(data);
      row.Lambda_R = cov.Lambda_R_prime;
      row.Lambda_P = cov.Lambda_M;
      OccupancyMeasure d;
      if (paradigm == Paradigm::rlhf) {
        auto [reward_data, policy_data] = split_dataset(data, cfg.split);
        (void)policy_data;
        fo = detail::fit(LossKind::mle, reward_data, ic.F, 0.0, cfg);
        MatrixXd r_hat = reward_table(LinearReward{fo.param, ic.F}, inst.features);
        d = solve_regularized_occupancy(r_hat, inst.d_mu, row.beta, inst.mdp).d;
      } else {
        fo = detail::fit(LossKind::dpo_mdp, data, ic.B_occ, row.beta, cfg);
        d = occupancy_from_theta(fo.param, inst.features);
      }
      row.flow_residual = flow_residual(d, inst.mdp).cwiseAbs().maxCoeff();
      gap = mdp_gap_report(policy_from_occupancy(d), inst, row.beta > 0 ? row.beta : 1.0);
    }
    row.G = gap.G;
    row.G_reg = gap.G_reg;
    row.D = gap.D;
    row.final_loss = fo.loss;
    row.final_grad_norm = fo.grad_norm;
    row.iters = fo.iters;
    if (fo.warn) detail::add_flag(row.warn_flags, "precision_warning");
    if (fo.degenerate) detail::add_flag(row.warn_flags, "degenerate_beta");
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

/// run_single under a wall-clock guard. A run that exceeds the budget is
/// abandoned (its thread is detached) and reported as a timeout row.
inline ResultRow run_guarded(const ExperimentConfig& cfg, Paradigm paradigm, int n, std::uint64_t seed) {
  auto prom = std::make_shared<std::promise<ResultRow>>();
  std::future<ResultRow> fut = prom->get_future();
  std::thread([prom, cfg, paradigm, n, seed] { prom->set_value(run_single(cfg, paradigm, n, seed)); }).detach();
  if (fut.wait_for(std::chrono::duration<double>(cfg.row_budget_s)) == std::future_status::ready) return fut.get();
  ResultRow row;
  row.seed = seed;
  row.paradigm = to_string(paradigm);
  row.setting = to_string(cfg.setting);
  row.n = n;
  row.d_R = cfg.instance.d_R;
  row.d_P = cfg.instance.d_P;
  row.d_M = cfg.setting == Setting::mdp ? cfg.instance.d_M : 0;
  row.lambda = 1.0 / n;
  row.beta = paradigm == Paradigm::rlhf ? cfg.rlhf_beta() : cfg.beta_policy.at(n, cfg.instance.d_P);
  row.run_id = config_hash(cfg).substr(0, 8) + "/" + row.paradigm + "/" + row.setting + "/n" + std::to_string(n) +
               "/s" + std::to_string(seed);
  row.wall_ms = cfg.row_budget_s * 1000.0;
  row.error = "timeout: row exceeded " + format_double(cfg.row_budget_s) + " s";
  return row;
}

// ---------------------------------------------------------------- sweeps

struct SweepTask {
  int n;
  std::uint64_t seed;
  Paradigm paradigm;
};

inline std::vector<SweepTask> sweep_tasks(const ExperimentConfig& cfg) {
  std::vector<SweepTask> tasks;
  for (int n : cfg.n_grid)
    for (std::uint64_t s : cfg.seeds) {
      if (cfg.paradigm != Paradigm::dpo) tasks.push_back({n, s, Paradigm::rlhf});
      if (cfg.paradigm != Paradigm::rlhf) tasks.push_back({n, s, Paradigm::dpo});
    }
  return tasks;
}

inline int effective_workers(int requested) {
  const char* det = std::getenv("PREFOPT_DETERMINISTIC");
  if (det && std::string(det) == "1") return 1;
  if (requested <= 0) return std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

struct SweepResult {
  std::vector<ResultRow> rows;  ///< canonical task order
  int failures = 0;
  std::string csv_path;
  std::string manifest_path;
};

/**
 * Executes grid x seeds (x paradigms) on a worker pool. Rows are appended to
 * the CSV as they finish; on completion the file is rewritten in canonical
 * task order so that outputs do not depend on the worker count.
 */
inline SweepResult sweep(const ExperimentConfig& cfg, int workers = 1) {
  cfg.validate();
  workers = effective_workers(workers);
  const auto tasks = sweep_tasks(cfg);
  SweepResult res;
  res.rows.resize(tasks.size());
  res.csv_path = cfg.output;
  res.manifest_path = cfg.output + ".manifest.json";

  std::mutex write_mu;
  std::ofstream partial(cfg.output + ".partial", std::ios::binary | std::ios::trunc);
  if (!partial) throw InvalidArgument("sweep: cannot write '" + cfg.output + ".partial'");
  partial << csv_line(ResultRow::header()) << "\r\n";
  partial.flush();

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      ResultRow row = run_guarded(cfg, tasks[i].paradigm, tasks[i].n, tasks[i].seed);
      std::lock_guard<std::mutex> lock(write_mu);
      partial << csv_line(row.fields()) << "\r\n";
      partial.flush();
      res.rows[i] = std::move(row);
    }
  };
  std::vector<std::thread> pool;
  const int k = std::min<int>(workers, static_cast<int>(std::max<std::size_t>(tasks.size(), 1)));
  for (int w = 1; w < k; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  partial.close();

  std::string csv = csv_line(ResultRow::header()) + "\r\n";
  for (const ResultRow& r : res.rows) {
    csv += csv_line(r.fields()) + "\r\n";
    if (r.failed()) ++res.failures;
  }
  const std::string tmp = cfg.output + ".tmp";
  write_file(tmp, csv);
  std::filesystem::rename(tmp, cfg.output);
  std::filesystem::remove(cfg.output + ".partial");

  json manifest{{"schema_version", kSchemaVersion},
                {"library_version", kLibraryVersion},
                {"config_hash", config_hash(cfg)},
                {"config", to_json(cfg)},
                {"workers", workers},
                {"rows", res.rows.size()},
                {"failures", res.failures},
                {"csv", cfg.output}};
  write_file(res.manifest_path, manifest.dump(2) + "\n");
  return res;
}

// ---------------------------------------------------------------- reports

struct SlopeRow {
  std::string paradigm, setting, metric;
  int points = 0;
  double slope = NAN, r_squared = NAN;
  std::string note;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Per (paradigm, setting): log-log slope of the per-n median of G and G_reg.
inline std::vector<SlopeRow> report_slopes(const std::vector<ResultRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<const ResultRow*>>> groups;
  for (const ResultRow& r : rows)
    if (!r.failed()) groups[{r.paradigm, r.setting}][r.n].push_back(&r);
  std::vector<SlopeRow> out;
  for (const auto& [key, by_n] : groups) {
    for (const char* metric : {"G", "G_reg"}) {
      SlopeRow s;
      s.paradigm = key.first;
      s.setting = key.second;
      s.metric = metric;
      std::vector<double> ns, meds;
      for (const auto& [n, rs] : by_n) {
        std::vector<double> v;
        for (const ResultRow* r : rs) v.push_back(std::string(metric) == "G" ? r->G : r->G_reg);
        ns.push_back(n);
        meds.push_back(median(v));
      }
      s.points = static_cast<int>(ns.size());
      try {
        RateFit f = rate_fit(ns, meds, RateModel::power);
        s.slope = f.slope;
        s.r_squared = f.r_squared;
      } catch (const std::exception& e) {
        s.note = e.what();
      }
      out.push_back(s);
    }
  }
  return out;
}

}  // namespace prefopt

// prefopt command-line runner: gen, run, sweep, verify, report.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "prefopt/experiment.hpp"
#include "prefopt/serialize.hpp"
#include "prefopt/verify.hpp"

using namespace prefopt;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int workers = 0;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) cfg = experiment_config_from_json(json::parse(read_file(c.config)));
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.out.empty()) cfg.output = c.out;
  cfg.validate();
  return cfg;
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") std::cout << text;
  else write_file(out, text);
}

int cmd_gen(const Common& c, int n) {
  ExperimentConfig cfg = load_config(c);
  const std::uint64_t seed = cfg.seeds.front();
  InstanceConfig ic = cfg.instance;
  ic.seed = run_instance_seed(cfg.instance.seed, seed);
  json j;
  if (cfg.setting == Setting::bandit) {
    BanditInstance inst = make_bandit_instance(ic);
    j["instance"] = to_json(inst);
    if (n > 0) j["dataset"] = to_json(sample_preferences(inst, n, run_data_seed(cfg.instance.seed, seed, n)));
  } else {
    MdpInstance inst = make_mdp_instance(ic);
    j["instance"] = to_json(inst);
    if (n > 0)
      j["dataset"] = to_json(sample_trajectory_preferences(inst, n, run_data_seed(cfg.instance.seed, seed, n)));
  }
  j["instance_hash"] = json_hash(j["instance"]);
  emit(c.out, j.dump(2) + "\n");
  return 0;
}

int cmd_run(const Common& c) {
  Common cc = c;
  cc.out.clear();
  ExperimentConfig cfg = load_config(cc);
  std::string csv = csv_line(ResultRow::header()) + "\r\n";
  int failures = 0;
  for (const SweepTask& t : sweep_tasks(cfg)) {
    ResultRow r = run_single(cfg, t.paradigm, t.n, t.seed);
    if (r.failed()) ++failures;
    csv += csv_line(r.fields()) + "\r\n";
  }
  emit(c.out, csv);
  return failures ? 1 : 0;
}

int cmd_sweep(const Common& c) {
  ExperimentConfig cfg = load_config(c);
  SweepResult res = sweep(cfg, c.workers);
  std::cerr << res.rows.size() << " rows, " << res.failures << " failed; wrote " << res.csv_path << " and "
            << res.manifest_path << "\n";
  return res.failures ? 1 : 0;
}

int cmd_verify(const Common& c, const std::string& suite) {
  VerifyOptions o;
  if (c.seed) o.seed = *c.seed;
  auto checks = verify(suite, o);
  emit(c.out, to_json(checks).dump(2) + "\n");
  for (const Check& ch : checks)
    std::cerr << (ch.pass ? "pass " : "FAIL ") << ch.suite << "/" << ch.property << " = " << format_double(ch.measured)
              << " " << ch.relation << " " << format_double(ch.threshold) << "\n";
  return all_pass(checks) ? 0 : 1;
}

int cmd_report(const Common& c, const std::string& input) {
  auto rows = read_rows(read_file(input));
  std::string csv = csv_line({"paradigm", "setting", "metric", "points", "slope", "r_squared", "note"}) + "\r\n";
  for (const SlopeRow& s : report_slopes(rows))
    csv += csv_line({s.paradigm, s.setting, s.metric, std::to_string(s.points), format_double(s.slope),
                     format_double(s.r_squared), s.note}) +
           "\r\n";
  emit(c.out, csv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-optimization experiments: RLHF and DPO on synthetic linear instances"};
  app.require_subcommand(1);
  Common c;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", c.config, "experiment config (JSON)");
    s->add_option("--seed", seed_value, "run seed; overrides the config's seed list");
    s->add_option("--out", c.out, "output path ('-' for stdout)");
  };

  auto* gen = app.add_subcommand("gen", "generate an instance (and optionally a dataset) as JSON");
  add_common(gen);
  int gen_n = 0;
  gen->add_option("--n", gen_n, "also sample a preference dataset of this size");

  auto* run = app.add_subcommand("run", "run every grid point for the configured seeds, CSV to --out");
  add_common(run);

  auto* sw = app.add_subcommand("sweep", "parallel sweep with manifest");
  add_common(sw);
  sw->add_option("--workers", c.workers, "worker threads (0 = hardware concurrency)");

  auto* ver = app.add_subcommand("verify", "run a property-check suite");
  add_common(ver);
  std::string suite = "all";
  ver->add_option("--suite", suite, "gradients|optimum|constants|spectra|mdp|rates|realizability|probe|all");

  auto* rep = app.add_subcommand("report", "log-log slope fits of median gaps from a results CSV");
  add_common(rep);
  std::string input;
  rep->add_option("input", input, "results CSV")->required();

  CLI11_PARSE(app, argc, argv);
  for (auto* s : {gen, run, sw, ver, rep})
    if (s->parsed() && s->count("--seed")) c.seed = seed_value;

  try {
    if (gen->parsed()) return cmd_gen(c, gen_n);
    if (run->parsed()) return cmd_run(c);
    if (sw->parsed()) return cmd_sweep(c);
    if (ver->parsed()) return cmd_verify(c, suite);
    if (rep->parsed()) return cmd_report(c, input);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "prefopt/dpo.hpp"
#include "prefopt/metrics.hpp"
#include "prefopt/rlhf.hpp"
#include "prefopt/serialize.hpp"

namespace prefopt {

// Per-iterate traces. Every text returned here is a complete CSV document
// (header plus rows, CRLF line ends). Columns that a solver does not produce
// are written as empty fields.

inline std::vector<std::string> rlhf_trace_header() {
  return {"run_id", "t", "loss", "grad_norm", "gap", "alpha_norm", "min_policy_prob"};
}

inline std::vector<std::string> dpo_trace_header() {
  return {"run_id", "t", "loss", "grad_norm", "seminorm_gap", "flow_residual"};
}

namespace detail {

inline std::string opt_field(double v) { return std::isnan(v) ? std::string() : format_double(v); }

inline std::string csv_doc(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::string out = csv_line(header) + "\r\n";
  for (const auto& r : rows) out += csv_line(r) + "\r\n";
  return out;
}

}  // namespace detail

/// Reward-phase trace: loss and gradient norm only.
inline std::string mle_trace_csv(const std::string& run_id, const std::vector<MleState>& states) {
  std::vector<std::vector<std::string>> rows;
  for (const MleState& s : states)
    rows.push_back({run_id, std::to_string(s.t), format_double(s.loss_t), format_double(s.grad_norm_t), "", "", ""});
  return detail::csv_doc(rlhf_trace_header(), rows);
}

/// Policy-phase trace; `loss` is the negated sample objective so that it decreases.
inline std::string npg_trace_csv(const std::string& run_id, const NpgResult& res) {
  std::vector<std::vector<std::string>> rows;
  for (const NpgState& s : res.states)
    rows.push_back({run_id, std::to_string(s.t), format_double(-s.objective), format_double(s.grad_norm),
                    format_double(s.gap), format_double(s.alpha_norm), format_double(s.min_policy_prob)});
  return detail::csv_doc(rlhf_trace_header(), rows);
}

inline std::string dpo_trace_csv(const std::string& run_id, const std::vector<DpoState>& states) {
  std::vector<std::vector<std::string>> rows;
  for (const DpoState& s : states)
    rows.push_back({run_id, std::to_string(s.t), format_double(s.loss_t), format_double(s.grad_norm_t),
                    detail::opt_field(s.seminorm_gap_t), detail::opt_field(s.flow_residual_t)});
  return detail::csv_doc(dpo_trace_header(), rows);
}

// Flat key-value rows keyed by run_id: header "run_id,<keys...>", one data row.

inline std::string gap_report_csv(const std::string& run_id, const GapReport& g) {
  return detail::csv_doc({"run_id", "V_opt", "V_pi", "G", "V_reg_opt", "V_reg_pi", "G_reg", "D"},
                         {{run_id, format_double(g.V_opt), format_double(g.V_pi), format_double(g.G),
                           format_double(g.V_reg_opt), format_double(g.V_reg_pi), format_double(g.G_reg),
                           format_double(g.D)}});
}

inline std::string covering_stats_csv(const std::string& run_id, const CoveringStats& c) {
  return detail::csv_doc({"run_id", "lambda", "Lambda_R", "Lambda_P", "Lambda_R_prime", "Lambda_M"},
                         {{run_id, format_double(c.lambda), detail::opt_field(c.Lambda_R),
                           detail::opt_field(c.Lambda_P), detail::opt_field(c.Lambda_R_prime),
                           detail::opt_field(c.Lambda_M)}});
}

/// One column per ledger entry; constants defined only by analogy carry a "?" suffix.
inline std::string constants_ledger_csv(const std::string& run_id, const ConstantsLedger& c) {
  std::vector<std::string> head{"run_id"}, row{run_id};
  for (const LedgerEntry& e : c.entries()) {
    head.push_back(e.by_analogy ? e.name + "?" : e.name);
    row.push_back(format_double(e.value));
  }
  return detail::csv_doc(head, {row});
}

}  // namespace prefopt

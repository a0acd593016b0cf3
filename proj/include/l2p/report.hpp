#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "l2p/attacks.hpp"

namespace l2p {

using ordered_json = nlohmann::ordered_json;

/// "83.62±0.02" (percent, two decimals) — the table cell format.
std::string format_mean_std(const AccuracySummary& s);

struct AttackReport {
  std::string name;
  ordered_json params;
  AccuracySummary robust;
};

/// Clean and per-attack robust accuracy over R noisy evaluations, with
/// provenance metadata. JSON serialization is key-ordered and therefore
/// byte-deterministic for identical runs.
struct EvalReport {
  ordered_json meta;
  AccuracySummary clean;
  std::vector<AttackReport> attacks;

  ordered_json to_json() const;
  std::string to_table() const;
};

ordered_json summary_to_json(const AccuracySummary& s);
ordered_json attack_params_json(const AttackConfig& atk);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace l2p

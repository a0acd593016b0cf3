#include "l2p/report.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace l2p {

std::string format_mean_std(const AccuracySummary& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f±%.2f", 100.0 * s.mean, 100.0 * s.stddev);
  return buf;
}

ordered_json summary_to_json(const AccuracySummary& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"runs", s.runs}};
}

ordered_json attack_params_json(const AttackConfig& atk) {
  struct Visitor {
    ordered_json operator()(const FgsmConfig& c) const { return {{"eps", c.eps}}; }
    ordered_json operator()(const PgdConfig& c) const {
      return {{"eps", c.eps},
              {"steps", c.steps},
              {"step_size", c.step_size},
              {"random_start", c.random_start}};
    }
    ordered_json operator()(const CwConfig& c) const {
      return {{"c_lo", c.c_lo},       {"c_hi", c.c_hi}, {"binary_steps", c.binary_steps},
              {"max_iters", c.max_iters}, {"lr", c.lr}, {"kappa", c.kappa}};
    }
    ordered_json operator()(const FewPixelConfig& c) const {
      return {{"k", c.k},     {"pop_size", c.pop_size}, {"max_gens", c.max_gens},
              {"de_f", c.de_f}, {"de_cr", c.de_cr}};
    }
    ordered_json operator()(const EotConfig& c) const {
      return {{"samples", c.samples},
              {"single_step", c.single_step},
              {"eps", c.inner.eps},
              {"steps", c.inner.steps},
              {"step_size", c.inner.step_size}};
    }
  };
  return std::visit(Visitor{}, atk.v);
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["meta"] = meta;
  j["clean"] = summary_to_json(clean);
  j["attacks"] = ordered_json::array();
  for (const auto& a : attacks)
    j["attacks"].push_back(
        {{"name", a.name}, {"params", a.params}, {"robust_accuracy", summary_to_json(a.robust)}});
  return j;
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  std::vector<std::pair<std::string, std::string>> cols;
  cols.emplace_back("Clean", format_mean_std(clean));
  for (const auto& a : attacks) cols.emplace_back(a.name, format_mean_std(a.robust));
  std::size_t w = 0;
  for (const auto& [h, v] : cols) w = std::max(w, std::max(h.size(), v.size()));
  for (const auto& [h, v] : cols) os << "  " << std::string(w - h.size(), ' ') << h;
  os << "\n";
  for (const auto& [h, v] : cols) os << "  " << std::string(w - v.size(), ' ') << v;
  os << "\n";
  return os.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

}  // namespace l2p

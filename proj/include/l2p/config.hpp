#pragma once

#include <string>
#include <utility>
#include <vector>

#include "l2p/attacks.hpp"
#include "l2p/data.hpp"
#include "l2p/nn.hpp"
#include "l2p/trainer.hpp"

namespace l2p {

/// Exact rational parsing: "8/255" -> 8.0/255.0; plain decimals pass through.
double parse_fraction(const std::string& text);

/// Flat-sectioned key=value experiment description. Unknown keys are rejected
/// at parse time; every field has a canonical serialization so (digest, seed)
/// pins a run.
struct ExperimentConfig {
  // [experiment]
  std::uint64_t seed = 1;
  std::string output_dir = "runs/out";
  int repeats = 5;

  // [data]
  std::string dataset = "synthetic";  // cifar10 | cifar100 | mnist | synthetic
  std::string data_root = "data";
  int subset = 0;       // 0 = full split
  int test_subset = 0;  // 0 = full split
  bool augment = false;
  int synth_train = 5000;
  int synth_test = 1000;
  int synth_classes = 10;

  // [model]
  std::string arch = "mini-v1";  // mini-v1 | mini-v2 | mlp
  int base_channels = 16;
  int blocks_per_stage = 1;
  int stem_stride = 2;
  std::vector<int> mlp_widths{64, 10};
  bool mlp_perturb = true;
  std::vector<double> normalize_mean{0.5, 0.5, 0.5};
  std::vector<double> normalize_std{0.25, 0.25, 0.25};
  double theta0 = 0.01;
  double theta_min = 0.0;

  // [train]
  TrainConfig train;

  // [attacks]
  std::vector<std::string> attack_list{"pgd", "fgsm"};
  double eps = 8.0 / 255.0;  // shared by fgsm/pgd/eot
  int pgd_steps = 7;
  double pgd_step_size = 0.01;
  bool pgd_random_start = true;
  double cw_c_lo = 1e-3;
  double cw_c_hi = 1e10;
  int cw_binary_steps = 9;
  int cw_max_iters = 1000;
  double cw_lr = 5e-4;
  double cw_kappa = 0.0;
  std::vector<double> cw_kappa_sweep{0.0, 0.1, 1.0, 2.0, 5.0};
  int fewpixel_k = 1;
  int fewpixel_pop = 400;
  int fewpixel_gens = 75;
  int eot_samples = 80;
  int attack_samples = 0;  // 0: whole (sub)set; else cap the evaluated samples

  static ExperimentConfig from_file(const std::string& path);
  static ExperimentConfig from_text(const std::string& text);
  static ExperimentConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();

  /// Applies one "section.key" = value assignment (same dispatch the parser
  /// uses; unknown keys rejected).
  void set(const std::string& dotted_key, const std::string& value);

  std::string to_text() const;
  std::string digest() const;  // hex FNV-1a over the canonical text

  /// Dataset path honoring the L2P_DATA_ROOT environment override; synthetic
  /// data is generated on demand under the root.
  std::string resolved_data_dir() const;
  Dataset load_split(const std::string& split) const;
  Dataset load_train() const;
  Dataset load_test() const;

  Model build_model_from_config() const;
  AttackConfig make_attack(const std::string& name) const;
  Dataset subset_wrapper(const Dataset& ds, std::size_t n) const;
};

}  // namespace l2p

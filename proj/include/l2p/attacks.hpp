#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "l2p/data.hpp"
#include "l2p/nn.hpp"

namespace l2p {

struct FgsmConfig {
  double eps = 8.0 / 255.0;
};

struct PgdConfig {
  double eps = 8.0 / 255.0;
  int steps = 7;
  double step_size = 0.01;
  bool random_start = true;
};

struct CwConfig {
  double c_lo = 1e-3;
  double c_hi = 1e10;
  int binary_steps = 9;
  int max_iters = 1000;
  double lr = 5e-4;
  double kappa = 0.0;
};

struct FewPixelConfig {
  int k = 1;
  int pop_size = 400;
  int max_gens = 75;
  std::uint64_t seed = 0;
  // canonical DE defaults, recorded in config
  double de_f = 0.5;
  double de_cr = 0.9;
};

struct EotConfig {
  PgdConfig inner;
  int samples = 80;
  bool single_step = false;  // true: FGSM-style inner (one eps-sized step)
};

/// Tagged union of attack settings.
struct AttackConfig {
  std::variant<FgsmConfig, PgdConfig, CwConfig, FewPixelConfig, EotConfig> v;
  std::string name() const;
  void validate() const;
};

struct AdvExample {
  Tensor x_adv;  // same shape as the input sample, in [0,1]
  bool success = false;
  double linf = 0.0;
  double l2 = 0.0;
  int pixels_changed = 0;
};

/// Distortions recomputed from scratch against the original input, never
/// trusted from attack internals.
void fill_distortion(AdvExample& ex, const Tensor& x0);

/// d(loss)/d(input) with fresh noise; parameter gradients are suppressed.
Tensor input_gradient(Model& model, const Tensor& x, const std::vector<int>& targets);

/// Mean over k independently noise-sampled input gradients. Computed as
/// first + sum(deviations)/k so identical samples (theta = 0) reproduce the
/// single-pass gradient bitwise for any k.
Tensor eot_gradient(Model& model, const Tensor& x, const std::vector<int>& targets, int k_samples);

// Batched white-box attacks; x is [B, sample...] with pixels in [0,1].
Tensor fgsm_batch(Model& model, const Tensor& x, const std::vector<int>& targets, double eps);
Tensor pgd_batch(Model& model, const Tensor& x, const std::vector<int>& targets,
                 const PgdConfig& cfg, RngStream& rng);
Tensor eot_pgd_batch(Model& model, const Tensor& x, const std::vector<int>& targets,
                     const EotConfig& cfg, RngStream& rng);

// Single-sample entry points (x1 is one sample without the batch dim).
AdvExample fgsm(Model& model, const Tensor& x1, int target, double eps, RngStream& rng);
AdvExample pgd(Model& model, const Tensor& x1, int target, const PgdConfig& cfg, RngStream& rng);
AdvExample cw_l2(Model& model, const Tensor& x1, int target, const CwConfig& cfg, RngStream& rng);
AdvExample few_pixel(Model& model, const Tensor& x1, int target, const FewPixelConfig& cfg);

/// Accuracy over a dataset (noise active when the model has it enabled).
double accuracy(Model& model, const Dataset& ds, int batch_size = 128);

/// Accuracy on adversarial examples crafted against `model` itself.
double robust_accuracy(Model& model, const Dataset& ds, const AttackConfig& attack,
                       RngStream& rng, int batch_size = 128);

struct AccuracySummary {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> runs;
};

AccuracySummary summarize(const std::vector<double>& runs);

/// Adversarial examples crafted white-box on `source`, evaluated on `victim`,
/// repeated `repeats` times with the attack rng reset per repeat so only model
/// stochasticity varies across runs.
AccuracySummary transfer_eval(Model& source, Model& victim, const Dataset& ds,
                              const AttackConfig& attack, int repeats, std::uint64_t attack_seed,
                              int batch_size = 128);

}  // namespace l2p

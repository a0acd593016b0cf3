#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "l2p/attacks.hpp"
#include "l2p/data.hpp"
#include "l2p/nn.hpp"
#include "l2p/optim.hpp"

namespace l2p {

enum class TrainMode { kL2p, kL2pR, kPniStyle, kVanilla, kNone };
TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode mode);

enum class Alternation { kPerBatch, kPerEpoch };

/// Slope clamp for sqrt(theta) at zero: g and its gradient use
/// sqrt(max(theta, kThetaGradEps)).
inline constexpr double kThetaGradEps = 1e-12;

struct TrainConfig {
  int epochs = 40;
  int batch_size = 128;
  double lr = 0.1;
  std::vector<int> milestones{20, 32};  // epochs at which lr multiplies by lr_decay
  double lr_decay = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 1e-4;  // applied to W only; theta decays are always 0
  double gamma = 1e-4;         // regularizer weight
  double alpha = 0.5;          // clean-loss weight
  double beta = 0.5;           // adversarial-loss weight
  int warmup_epochs = 8;       // noise activates after this many epochs
  TrainMode mode = TrainMode::kL2p;
  bool adv_train = true;
  PgdConfig adv{.eps = 8.0 / 255.0, .steps = 3, .step_size = 0.01, .random_start = true};
  Alternation alternation = Alternation::kPerBatch;
  std::uint64_t seed = 1;
  bool augment_flip = false;
  bool augment_pad_crop = false;
  bool isolation_check = false;  // digest W/Theta around every step
  int log_every = 0;             // progress line every N batches (0: per epoch)

  void validate() const;
  double lr_at(int epoch) const;
  bool uses_noise() const;
  bool updates_theta() const;
};

struct EpochRecord {
  int epoch = 0;
  double clean_loss = std::numeric_limits<double>::quiet_NaN();
  double adv_loss = std::numeric_limits<double>::quiet_NaN();
  double theta_mean = 0.0;
  double theta_min = 0.0;
  double theta_max = 0.0;
  double lr = 0.0;
};

void append_epoch_record_csv(const std::string& path, const EpochRecord& rec);

/// Harmonic annealing: tau(t) = sum_{i=s}^{t} 1/(i - s + 1), so tau(s) = 1.
/// s is the first epoch at which noise is active. Rejects t < s.
double tau(int t, int s);

/// g(theta) = -sum_elements sqrt(max(theta, eps)) / tau over all Theta tensors.
double regularizer_value(const Model& model, double tau_value);
/// d g / d theta for one element.
double regularizer_grad(double theta, double tau_value);

struct Batch {
  Tensor x;
  std::vector<int> y;
  Tensor x_adv;  // defined when adversarial training is on
};

struct StepContext {
  SgdOptimizer optimizer;
  RngStream attack_rng;
  double lr = 0.1;
  double tau_value = 1.0;
  bool noise_active = false;
  long isolation_checks = 0;
  long isolation_violations = 0;
};

struct StepLosses {
  double clean = std::numeric_limits<double>::quiet_NaN();
  double adv = std::numeric_limits<double>::quiet_NaN();
};

/// One SGD step on alpha*L(clean) + beta*L(adv) over W; Theta gradients are
/// not materialized and Theta values are bitwise unchanged.
StepLosses w_step(Model& model, const Batch& batch, const TrainConfig& cfg, StepContext& ctx);

/// One theta update per Algorithm's step form:
///   theta <- theta - lr * dL/dtheta - gamma * dg/dtheta, then projection.
/// Mode l2p-r drops the loss term; pni-style drops the regularizer term.
/// W is bitwise unchanged. Rejected while noise is inactive (warmup).
void theta_step(Model& model, const Batch& batch, const TrainConfig& cfg, StepContext& ctx);

struct TrainResult {
  std::vector<EpochRecord> records;
  SgdOptimizer optimizer;  // final momentum buffers, for checkpointing
  long isolation_checks = 0;
  long isolation_violations = 0;
};

using EpochCallback = std::function<void(const EpochRecord&, Model&, const SgdOptimizer&)>;

/// Full training loop: warmup epochs run w_step only with noise disabled;
/// afterwards w_step and theta_step alternate (per batch or per epoch).
/// Deterministic given cfg.seed.
TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace l2p

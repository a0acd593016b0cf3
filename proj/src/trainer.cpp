#include "l2p/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "l2p/ops.hpp"

namespace l2p {

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "l2p") return TrainMode::kL2p;
  if (s == "l2p-r") return TrainMode::kL2pR;
  if (s == "pni-style") return TrainMode::kPniStyle;
  if (s == "vanilla") return TrainMode::kVanilla;
  if (s == "none") return TrainMode::kNone;
  throw std::invalid_argument("unknown train mode '" + s +
                              "' (expected l2p|l2p-r|pni-style|vanilla|none)");
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kL2p: return "l2p";
    case TrainMode::kL2pR: return "l2p-r";
    case TrainMode::kPniStyle: return "pni-style";
    case TrainMode::kVanilla: return "vanilla";
    case TrainMode::kNone: return "none";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1) throw std::invalid_argument("train: epochs/batch_size >= 1");
  if (warmup_epochs < 0 || (uses_noise() && warmup_epochs >= epochs))
    throw std::invalid_argument("train: warmup_epochs must be < epochs for noise modes");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("train: milestones must be strictly increasing");
  if (lr <= 0 || lr_decay <= 0) throw std::invalid_argument("train: lr and lr_decay must be > 0");
  if (alpha < 0 || beta < 0 || alpha + beta == 0)
    throw std::invalid_argument("train: alpha/beta must be >= 0 and not both zero");
  if (beta > 0 && adv_train) AttackConfig{adv}.validate();
}

double TrainConfig::lr_at(int epoch) const {
  // lr changes at the milestone epoch itself (1-based)
  double v = lr;
  for (int m : milestones)
    if (epoch >= m) v *= lr_decay;
  return v;
}

bool TrainConfig::uses_noise() const {
  return mode == TrainMode::kL2p || mode == TrainMode::kL2pR || mode == TrainMode::kPniStyle;
}

bool TrainConfig::updates_theta() const { return uses_noise(); }

void append_epoch_record_csv(const std::string& path, const EpochRecord& rec) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open epoch csv: " + path);
  if (fresh) f << "epoch,lr,clean_loss,adv_loss,theta_mean,theta_min,theta_max\n";
  f.precision(17);
  f << rec.epoch << "," << rec.lr << ",";
  if (std::isfinite(rec.clean_loss)) f << rec.clean_loss;
  f << ",";
  if (std::isfinite(rec.adv_loss)) f << rec.adv_loss;
  f << "," << rec.theta_mean << "," << rec.theta_min << "," << rec.theta_max << "\n";
}

double tau(int t, int s) {
  if (t < s)
    throw std::invalid_argument("tau: epoch " + std::to_string(t) + " before noise start " +
                                std::to_string(s));
  double acc = 0.0;
  for (int i = s; i <= t; ++i) acc += 1.0 / static_cast<double>(i - s + 1);
  return acc;
}

double regularizer_value(const Model& model, double tau_value) {
  if (tau_value <= 0.0) throw std::invalid_argument("regularizer: tau must be positive");
  double acc = 0.0;
  for (const auto& pl : model.perturb_layers())
    for (double v : pl.theta.data()) acc += std::sqrt(std::max(v, kThetaGradEps));
  return -acc / tau_value;
}

double regularizer_grad(double theta, double tau_value) {
  return -1.0 / (2.0 * tau_value * std::sqrt(std::max(theta, kThetaGradEps)));
}

namespace {

// alpha * L(clean) + beta * L(adv); records the component values
Tensor composite_loss(Model& model, const Batch& batch, const TrainConfig& cfg, bool noise,
                      StepLosses& out) {
  Tensor total;
  if (cfg.alpha > 0.0) {
    Tensor clean = softmax_cross_entropy(model.forward(batch.x, noise), batch.y);
    out.clean = clean.item();
    total = scale(clean, cfg.alpha);
  }
  if (cfg.beta > 0.0 && batch.x_adv.defined()) {
    Tensor adv = softmax_cross_entropy(model.forward(batch.x_adv, noise), batch.y);
    out.adv = adv.item();
    Tensor term = scale(adv, cfg.beta);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) throw std::logic_error("composite_loss: nothing to optimize");
  return total;
}

struct ThetaAggregate {
  double mean = 0.0, min = 0.0, max = 0.0;
};

ThetaAggregate aggregate_theta(const Model& model) {
  ThetaAggregate agg;
  double sum = 0.0;
  std::size_t n = 0;
  bool first = true;
  for (const auto& pl : model.perturb_layers())
    for (double v : pl.theta.data()) {
      sum += v;
      if (first) {
        agg.min = agg.max = v;
        first = false;
      } else {
        agg.min = std::min(agg.min, v);
        agg.max = std::max(agg.max, v);
      }
      ++n;
    }
  if (n) agg.mean = sum / static_cast<double>(n);
  return agg;
}

}  // namespace

StepLosses w_step(Model& model, const Batch& batch, const TrainConfig& cfg, StepContext& ctx) {
  const std::uint64_t theta_before =
      cfg.isolation_check ? model.params().digest(ParamSet::kTheta) : 0;

  StepLosses losses;
  model.params().zero_grads();
  model.params().set_requires_grad(ParamSet::kTheta, false);
  try {
    backward(composite_loss(model, batch, cfg, ctx.noise_active, losses));
  } catch (...) {
    model.params().set_requires_grad(ParamSet::kTheta, true);
    throw;
  }
  model.params().set_requires_grad(ParamSet::kTheta, true);

  ctx.optimizer.step(model.params(), model.params().names_in(ParamSet::kWeights),
                     {.lr = ctx.lr,
                      .momentum = cfg.momentum,
                      .nesterov = cfg.nesterov,
                      .weight_decay = cfg.weight_decay});

  if (cfg.isolation_check) {
    ++ctx.isolation_checks;
    if (model.params().digest(ParamSet::kTheta) != theta_before) ++ctx.isolation_violations;
  }
  return losses;
}

void theta_step(Model& model, const Batch& batch, const TrainConfig& cfg, StepContext& ctx) {
  if (!ctx.noise_active)
    throw std::logic_error("theta_step: called during warmup (noise inactive)");
  const std::uint64_t w_before =
      cfg.isolation_check ? model.params().digest(ParamSet::kWeights) : 0;

  const bool loss_term = cfg.mode == TrainMode::kL2p || cfg.mode == TrainMode::kPniStyle;
  const bool reg_term = cfg.mode == TrainMode::kL2p || cfg.mode == TrainMode::kL2pR;

  if (loss_term) {
    StepLosses ignored;
    model.params().zero_grads();
    model.params().set_requires_grad(ParamSet::kWeights, false);
    try {
      backward(composite_loss(model, batch, cfg, true, ignored));
    } catch (...) {
      model.params().set_requires_grad(ParamSet::kWeights, true);
      throw;
    }
    model.params().set_requires_grad(ParamSet::kWeights, true);
  }

  for (auto& pl : model.perturb_layers()) {
    auto theta = pl.theta.raw_data();
    if (loss_term) {
      const auto g = pl.theta.grad();
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= ctx.lr * g[i];
    }
    if (reg_term) {
      for (std::size_t i = 0; i < theta.size(); ++i)
        theta[i] -= cfg.gamma * regularizer_grad(theta[i], ctx.tau_value);
    }
    project_theta(pl);
  }

  if (cfg.isolation_check) {
    ++ctx.isolation_checks;
    if (model.params().digest(ParamSet::kWeights) != w_before) ++ctx.isolation_violations;
  }
}

namespace {

Batch assemble_batch(Model& model, Tensor x, std::vector<int> y, const TrainConfig& cfg,
                     StepContext& ctx) {
  Batch b;
  b.x = std::move(x);
  b.y = std::move(y);
  if (cfg.adv_train && cfg.beta > 0.0)
    b.x_adv = pgd_batch(model, b.x, b.y, cfg.adv, ctx.attack_rng);
  return b;
}

}  // namespace

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (ds.count() == 0) throw std::invalid_argument("train: dataset is empty");

  TrainResult result;
  StepContext ctx;
  ctx.attack_rng = RngStream(derive_seed(cfg.seed, "train-attack"));

  model.set_noise_enabled(false);
  const int noise_start = cfg.warmup_epochs + 1;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    ctx.lr = cfg.lr_at(epoch);
    ctx.noise_active = cfg.uses_noise() && epoch >= noise_start;
    model.set_noise_enabled(ctx.noise_active);
    ctx.tau_value = ctx.noise_active ? tau(epoch, noise_start) : 1.0;

    BatchPlan plan{.batch_size = cfg.batch_size,
                   .shuffle_seed = derive_seed(cfg.seed, "shuffle"),
                   .flip = cfg.augment_flip,
                   .pad_crop = cfg.augment_pad_crop};

    double clean_sum = 0.0, adv_sum = 0.0;
    long clean_n = 0, adv_n = 0;
    int batch_idx = 0;

    const bool alternate_now = ctx.noise_active && cfg.updates_theta();
    BatchIterator it(ds, plan, epoch);
    Tensor bx;
    std::vector<int> by;
    while (it.next(bx, by)) {
      Batch batch = assemble_batch(model, std::move(bx), std::move(by), cfg, ctx);
      const StepLosses losses = w_step(model, batch, cfg, ctx);
      if (std::isfinite(losses.clean)) {
        clean_sum += losses.clean;
        ++clean_n;
      }
      if (std::isfinite(losses.adv)) {
        adv_sum += losses.adv;
        ++adv_n;
      }
      if (alternate_now && cfg.alternation == Alternation::kPerBatch)
        theta_step(model, batch, cfg, ctx);
      ++batch_idx;
      if (cfg.log_every > 0 && batch_idx % cfg.log_every == 0)
        std::printf("epoch %d batch %d clean %.4f adv %.4f\n", epoch, batch_idx, losses.clean,
                    losses.adv);
    }

    if (alternate_now && cfg.alternation == Alternation::kPerEpoch) {
      BatchIterator jt(ds, plan, epoch);
      while (jt.next(bx, by)) {
        Batch batch = assemble_batch(model, std::move(bx), std::move(by), cfg, ctx);
        theta_step(model, batch, cfg, ctx);
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = ctx.lr;
    if (clean_n) rec.clean_loss = clean_sum / clean_n;
    if (adv_n) rec.adv_loss = adv_sum / adv_n;
    const auto agg = aggregate_theta(model);
    rec.theta_mean = agg.mean;
    rec.theta_min = agg.min;
    rec.theta_max = agg.max;
    result.records.push_back(rec);
    std::printf("epoch %3d/%d lr %.4g clean %.4f adv %.4f theta %.5f\n", epoch, cfg.epochs,
                rec.lr, rec.clean_loss, rec.adv_loss, rec.theta_mean);
    std::fflush(stdout);
    if (on_epoch) on_epoch(rec, model);
  }

  result.isolation_checks = ctx.isolation_checks;
  result.isolation_violations = ctx.isolation_violations;
  return result;
}

}  // namespace l2p

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "l2p/checkpoint.hpp"
#include "l2p/config.hpp"
#include "l2p/report.hpp"
#include "l2p/trainer.hpp"

namespace l2p {

using Overrides = std::vector<std::pair<std::string, std::string>>;

struct TrainOutputs {
  std::string final_ckpt;
  std::string best_ckpt;
  std::string epochs_csv;
  std::string theta_csv;
  std::string summary_json;
  std::vector<EpochRecord> records;
  long isolation_checks = 0;
  long isolation_violations = 0;
};

/// Full training run: resolves data, builds the model, trains, writes per-epoch
/// CSVs, final + best checkpoints, and a JSON summary into cfg.output_dir.
TrainOutputs run_train(const ExperimentConfig& cfg);

/// Loads a checkpoint (its embedded config supplies dataset/attack settings,
/// amendable via overrides), evaluates clean and per-attack robust accuracy
/// over `repeats` noisy evaluations. Empty attack list uses the config's.
EvalReport run_eval(const std::string& ckpt_path, std::vector<std::string> attacks, int repeats,
                    const Overrides& overrides = {});

/// Adversarial examples crafted on the source checkpoint, evaluated on the
/// victim checkpoint.
EvalReport run_transfer(const std::string& source_ckpt, const std::string& victim_ckpt,
                        const std::string& attack, int repeats, const Overrides& overrides = {});

/// One robust-accuracy row per swept value. Supported params: eps (fgsm, pgd,
/// eot), kappa (cw), steps (pgd), k (fewpixel), samples (eot).
ordered_json run_sweep(const std::string& ckpt_path, const std::string& param,
                       const std::vector<std::string>& values, const std::string& attack,
                       int repeats, const Overrides& overrides = {});

}  // namespace l2p

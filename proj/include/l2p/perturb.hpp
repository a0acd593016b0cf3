#pragma once

#include <string>
#include <vector>

#include "l2p/tensor.hpp"

namespace l2p {

class Model;

/// Learnable per-element Gaussian feature perturbation: adds theta .* z with
/// z ~ N(0,1) drawn fresh per call per batch element. theta is shaped like the
/// per-sample feature map it perturbs and lives in the Theta parameter set.
struct PerturbationLayer {
  std::string name;
  Tensor theta;
  double theta_min = 0.0;
  bool enabled = false;
  RngStream rng;

  /// features + theta .* z when enabled, otherwise the input tensor itself
  /// (no graph node). The sampled z is captured by the graph node so backward
  /// replays the exact same realization.
  Tensor apply(const Tensor& features);
};

/// theta <- max(theta, theta_min) elementwise.
void project_theta(PerturbationLayer& layer);

struct ThetaStats {
  std::string layer;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

ThetaStats theta_stats(const PerturbationLayer& layer);
std::vector<ThetaStats> theta_stats(const Model& model);

/// Appends one row per layer: epoch,layer,mean,min,max (header written when
/// the file is empty or missing).
void append_theta_stats_csv(const std::string& path, int epoch,
                            const std::vector<ThetaStats>& stats);

}  // namespace l2p

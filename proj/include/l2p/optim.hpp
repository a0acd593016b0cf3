#pragma once

#include <map>
#include <string>
#include <vector>

#include "l2p/params.hpp"

namespace l2p {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.0;
  bool nesterov = false;
  double weight_decay = 0.0;
};

/// SGD with optional Nesterov momentum and decoupled-per-call weight decay.
/// Velocity buffers are created shape-matched on first use and serialize into
/// checkpoints. Update rule per parameter p with gradient g:
///   g' = g + wd * p
///   v  = momentum * v + g'
///   p -= lr * (g' + momentum * v)   [nesterov]
///   p -= lr * v                     [classic]
class SgdOptimizer {
 public:
  void step(ParamStore& params, const std::vector<std::string>& names, const SgdConfig& cfg);

  const std::map<std::string, std::vector<double>>& velocities() const { return velocity_; }
  void load_velocity(const std::string& name, std::vector<double> v);

 private:
  std::map<std::string, std::vector<double>> velocity_;
};

/// Minimal Adam on a raw vector (used by the C&W attack's box variable).
class AdamVec {
 public:
  AdamVec(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::vector<double>& x, std::span<const double> g);
  void reset();

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace l2p

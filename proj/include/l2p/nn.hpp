#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "l2p/params.hpp"
#include "l2p/perturb.hpp"
#include "l2p/tensor.hpp"

namespace l2p {

enum class LayerKind {
  kNormalize,
  kConv,
  kRelu,
  kAvgPool,
  kGlobalAvgPool,
  kFlatten,
  kLinear,
  kResidualV1,   // avg-pool + zero-pad shortcut on shape change
  kResidualV2,   // 1x1 conv shortcut on shape change
  kPerturbSlot,  // standalone noise injection point
};

struct LayerSpec {
  LayerKind kind;
  int out_channels = 0;  // conv / residual / linear output width
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int window = 0;  // avg_pool
  std::vector<double> mean, stddev;  // normalize

  static LayerSpec normalize(std::vector<double> mean, std::vector<double> stddev);
  static LayerSpec conv(int out_channels, int kernel, int stride, int pad);
  static LayerSpec relu();
  static LayerSpec avg_pool(int window, int stride);
  static LayerSpec global_avg_pool();
  static LayerSpec flatten();
  static LayerSpec linear(int out_dim);
  static LayerSpec residual_v1(int out_channels, int stride);
  static LayerSpec residual_v2(int out_channels, int stride);
  static LayerSpec perturb_slot();

  std::string to_text() const;
  static LayerSpec from_text(const std::string& line);
};

/// Ordered layers over a ParamStore with a W/Theta partition plus the attached
/// perturbation-layer handles. Residual blocks carry a built-in perturbation
/// slot at the block output, before the final ReLU.
class Model {
 public:
  Model(std::vector<LayerSpec> spec, Shape input_shape, std::uint64_t seed, double theta0,
        double theta_min);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  /// Deep copy: private parameter buffers and rng streams.
  Model clone() const;

  /// x is a batch shaped [B, input_shape...]. With noise=false repeated calls
  /// are identical; with noise=true every enabled perturb slot draws fresh z.
  Tensor forward(const Tensor& x, bool noise);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::vector<PerturbationLayer>& perturb_layers() { return perturb_; }
  const std::vector<PerturbationLayer>& perturb_layers() const { return perturb_; }

  void set_noise_enabled(bool on);
  bool has_enabled_noise() const;

  const Shape& input_shape() const { return input_shape_; }
  int num_classes() const { return num_classes_; }
  double theta0() const { return theta0_; }
  double theta_min() const { return theta_min_; }

  const std::vector<LayerSpec>& spec() const { return spec_; }
  std::string spec_text() const;
  std::uint64_t spec_hash() const;

  /// Re-seed the perturbation rng streams (used by checkpoint load).
  void seed_noise_streams(std::uint64_t seed);

 private:
  struct BlockRefs;  // per-layer parameter name bundle
  std::vector<LayerSpec> spec_;
  Shape input_shape_;
  int num_classes_ = 0;
  double theta0_ = 0.01;
  double theta_min_ = 0.0;
  std::uint64_t seed_ = 0;
  ParamStore params_;
  std::vector<PerturbationLayer> perturb_;
  std::vector<int> perturb_index_;  // per layer: index into perturb_ or -1
};

/// Validates composition (first offending pair named on failure), initializes
/// parameters He-style fan-in for conv/linear, instantiates perturb slots
/// disabled at theta0.
Model build_model(std::vector<LayerSpec> spec, Shape input_shape, std::uint64_t seed,
                  double theta0 = 0.01, double theta_min = 0.0);

/// Mini residual families standing in for the CIFAR baselines.
std::vector<LayerSpec> mini_v1_spec(int base_channels, int blocks_per_stage, int classes,
                                    int stem_stride, std::vector<double> norm_mean,
                                    std::vector<double> norm_std);
std::vector<LayerSpec> mini_v2_spec(int base_channels, int blocks_per_stage, int classes,
                                    int stem_stride, std::vector<double> norm_mean,
                                    std::vector<double> norm_std);
/// widths = {in, hidden..., out}; optional perturb slot after each hidden relu.
std::vector<LayerSpec> mlp_spec(const std::vector<int>& widths, bool perturb_slots);

std::string spec_to_text(const std::vector<LayerSpec>& spec);
std::vector<LayerSpec> spec_from_text(const std::string& text);

}  // namespace l2p

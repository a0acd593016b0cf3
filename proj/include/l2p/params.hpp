#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "l2p/tensor.hpp"

namespace l2p {

/// Partition tag: every trainable parameter lives in exactly one set.
enum class ParamSet { kWeights, kTheta };

/// Named parameters with a W/Theta partition and deterministic iteration
/// order (registration order).
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t, ParamSet set);
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  ParamSet set_of(const std::string& name) const;

  const std::vector<std::string>& names() const { return order_; }
  std::vector<std::string> names_in(ParamSet set) const;

  void zero_grads();
  void set_requires_grad(ParamSet set, bool v);
  void set_requires_grad_all(bool v);

  std::size_t scalar_count() const;
  std::size_t scalar_count(ParamSet set) const;

  /// Bitwise digest over the raw data of all tensors in a set, in
  /// registration order.
  std::uint64_t digest(ParamSet set) const;

 private:
  struct Entry {
    Tensor tensor;
    ParamSet set;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> map_;
};

/// RAII: disables grad tracking for every parameter in the store (attacks need
/// input gradients only), restoring the exact prior flags on exit.
class ParamGradGuard {
 public:
  explicit ParamGradGuard(ParamStore& store);
  ~ParamGradGuard();
  ParamGradGuard(const ParamGradGuard&) = delete;
  ParamGradGuard& operator=(const ParamGradGuard&) = delete;

 private:
  ParamStore* store_;
  std::vector<std::pair<std::string, bool>> saved_;
};

}  // namespace l2p

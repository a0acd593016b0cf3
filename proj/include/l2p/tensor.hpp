#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace l2p {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Deterministic random stream: mt19937_64 with a Box-Muller normal sampler.
/// State (including the cached spare normal) serializes to text so checkpoints
/// can replay noise draws exactly.
class RngStream {
 public:
  RngStream() : RngStream(0) {}
  explicit RngStream(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  int uniform_int(int lo, int hi);        // inclusive bounds
  double normal();                        // standard normal

  std::string serialize() const;
  static RngStream deserialize(const std::string& text);

  bool operator==(const RngStream& other) const;

 private:
  struct State;
  std::shared_ptr<State> st_;  // shared so layers can hold live handles
};

/// Stable per-component seed derivation from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;           // sized lazily during backward
  bool requires_grad = false;         // leaf flag
  bool needs_grad = false;            // requires_grad or downstream of one
  std::uint64_t node_seq = 0;         // creation order; 0 = not on a graph
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of 64-bit reals with an optional gradient slot.
/// Value-semantics handle over shared storage; ops produce fresh tensors and
/// record define-by-run graph nodes when any input participates in autodiff.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const;
  std::size_t size() const;
  int dim(int i) const;

  std::span<const double> data() const;
  /// In-place mutation hook for optimizers and projections. Callers must not
  /// mutate a tensor that is an input of a live graph awaiting backward.
  std::span<double> raw_data();
  double item() const;
  double at(std::size_t i) const;

  bool requires_grad() const;
  void set_requires_grad(bool v);
  bool needs_grad() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  /// Same data buffer contents, detached from any graph.
  Tensor detached() const;
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return p_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> p) : p_(std::move(p)) {}

 private:
  std::shared_ptr<detail::TensorImpl> p_;
};

/// Reverse-mode sweep from a scalar loss. Visits graph nodes exactly once in
/// reverse creation order; a tensor consumed by k ops accumulates k partials.
void backward(const Tensor& loss);

/// RAII guard: ops executed inside do not record graph nodes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// Non-finite output detection (NaN/Inf after an op). Defaults to on in debug
/// builds; can be forced at runtime for tests.
void set_finite_checks(bool on);
bool finite_checks();

namespace detail {

/// Shared op helper: wraps a computed buffer as a graph node when grad mode is
/// on and any parent needs grad; otherwise returns a plain tensor.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn);

void check_finite(const TensorImpl& t, const char* op_name);

}  // namespace detail

/// FNV-1a digest over the raw bytes of a tensor's data, for bitwise
/// change-detection contracts.
std::uint64_t digest_bytes(std::span<const double> values);
std::uint64_t digest_combine(std::uint64_t a, std::uint64_t b);

}  // namespace l2p

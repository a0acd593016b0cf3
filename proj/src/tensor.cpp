#include "l2p/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace l2p {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dim " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

// ---------------------------------------------------------------------------
// RngStream

struct RngStream::State {
  std::mt19937_64 gen;
  bool has_spare = false;
  double spare = 0.0;
};

RngStream::RngStream(std::uint64_t seed) : st_(std::make_shared<State>()) {
  st_->gen.seed(seed);
}

std::uint64_t RngStream::next_u64() { return st_->gen(); }

double RngStream::uniform() {
  // 53-bit mantissa in [0, 1)
  return static_cast<double>(st_->gen() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int RngStream::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: hi < lo");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection-free modulo bias is negligible for our spans; keep it simple and
  // deterministic.
  return lo + static_cast<int>(st_->gen() % span);
}

double RngStream::normal() {
  if (st_->has_spare) {
    st_->has_spare = false;
    return st_->spare;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  st_->spare = r * std::sin(a);
  st_->has_spare = true;
  return r * std::cos(a);
}

namespace {
std::uint64_t double_bits(double v) {
  std::uint64_t b;
  std::memcpy(&b, &v, sizeof(b));
  return b;
}
double bits_double(std::uint64_t b) {
  double v;
  std::memcpy(&v, &b, sizeof(v));
  return v;
}
}  // namespace

std::string RngStream::serialize() const {
  std::ostringstream os;
  os << st_->gen << " " << (st_->has_spare ? 1 : 0) << " " << double_bits(st_->spare);
  return os.str();
}

RngStream RngStream::deserialize(const std::string& text) {
  RngStream s(0);
  std::istringstream is(text);
  int has = 0;
  std::uint64_t bits = 0;
  is >> s.st_->gen >> has >> bits;
  if (!is) throw std::invalid_argument("RngStream::deserialize: malformed state text");
  s.st_->has_spare = (has != 0);
  s.st_->spare = bits_double(bits);
  return s;
}

bool RngStream::operator==(const RngStream& other) const {
  return serialize() == other.serialize();
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  // FNV-1a over the name, then splitmix64 finalization mixed with the master.
  std::uint64_t h = 1469598103934665603ull;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t z = master + 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// TensorImpl / Tensor

namespace detail {

void TensorImpl::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_node_seq{1};
thread_local bool g_grad_enabled = true;
#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

std::shared_ptr<detail::TensorImpl> new_impl(Shape shape, std::vector<double> data, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  if (data.size() != n)
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  auto p = std::make_shared<detail::TensorImpl>();
  p->shape = std::move(shape);
  p->data = std::move(data);
  p->requires_grad = requires_grad;
  p->needs_grad = requires_grad;
  return p;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(new_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, RngStream& rng, double stddev, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = stddev * rng.normal();
  return Tensor(new_impl(std::move(shape), std::move(d), requires_grad));
}

const Shape& Tensor::shape() const { return p_->shape; }
std::size_t Tensor::size() const { return p_->data.size(); }

int Tensor::dim(int i) const {
  if (i < 0 || static_cast<std::size_t>(i) >= p_->shape.size())
    throw std::out_of_range("tensor dim index out of range");
  return p_->shape[static_cast<std::size_t>(i)];
}

std::span<const double> Tensor::data() const { return {p_->data.data(), p_->data.size()}; }
std::span<double> Tensor::raw_data() { return {p_->data.data(), p_->data.size()}; }

double Tensor::item() const {
  if (p_->data.size() != 1)
    throw std::invalid_argument("item() on non-scalar tensor " + shape_str(p_->shape));
  return p_->data[0];
}

double Tensor::at(std::size_t i) const { return p_->data.at(i); }

bool Tensor::requires_grad() const { return p_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  p_->requires_grad = v;
  p_->needs_grad = v || p_->node_seq != 0;
}

bool Tensor::needs_grad() const { return p_->needs_grad; }

bool Tensor::has_grad() const { return p_->grad.size() == p_->data.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no gradient (backward not run?)");
  return {p_->grad.data(), p_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
  p_->ensure_grad();
  return {p_->grad.data(), p_->grad.size()};
}

void Tensor::zero_grad() {
  if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0);
}

Tensor Tensor::detached() const {
  auto p = new_impl(p_->shape, p_->data, false);
  return Tensor(std::move(p));
}

Tensor Tensor::clone() const { return detached(); }

// ---------------------------------------------------------------------------
// Autograd

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

namespace detail {

void check_finite(const TensorImpl& t, const char* op_name) {
  if (!g_finite_checks) return;
  for (double v : t.data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by op '") + op_name + "'");
  }
}

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
  auto p = new_impl(std::move(shape), std::move(data), false);
  bool any_needs = false;
  for (const auto& t : parents)
    if (t.defined() && t.needs_grad()) any_needs = true;
  if (g_grad_enabled && any_needs) {
    p->needs_grad = true;
    p->node_seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
    p->parents.reserve(parents.size());
    for (const auto& t : parents) p->parents.push_back(t.impl());
    p->backward_fn = std::move(backward_fn);
  }
  if (g_finite_checks) check_finite(*p, "result");
  return Tensor(std::move(p));
}

}  // namespace detail

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  auto root = loss.impl();
  if (root->data.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root->shape));
  if (root->node_seq == 0 && !root->requires_grad)
    throw std::invalid_argument("backward: tensor is detached from any graph");

  root->ensure_grad();
  root->grad[0] += 1.0;
  if (root->node_seq == 0) return;  // lone leaf

  // Collect reachable graph nodes; creation order is a topological order for
  // a define-by-run graph, so visiting by descending node_seq is reverse-topo.
  std::vector<detail::TensorImpl*> nodes;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<detail::TensorImpl*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto* cur = stack.back();
    stack.pop_back();
    if (cur->node_seq != 0) nodes.push_back(cur);
    for (auto& par : cur->parents) {
      if (par->node_seq != 0 && seen.insert(par.get()).second) stack.push_back(par.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(),
            [](auto* a, auto* b) { return a->node_seq > b->node_seq; });
  for (auto* node : nodes) {
    node->ensure_grad();
    if (node->backward_fn) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// Digests

std::uint64_t digest_bytes(std::span<const double> values) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  const std::size_t n = values.size() * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t digest_combine(std::uint64_t a, std::uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2);
  return a;
}

}  // namespace l2p

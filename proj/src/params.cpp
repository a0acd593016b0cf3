#include "l2p/params.hpp"

#include <stdexcept>

namespace l2p {

Tensor& ParamStore::add(const std::string& name, Tensor t, ParamSet set) {
  if (map_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  t.set_requires_grad(true);
  order_.push_back(name);
  auto [it, ok] = map_.emplace(name, Entry{std::move(t), set});
  (void)ok;
  return it->second.tensor;
}

bool ParamStore::contains(const std::string& name) const { return map_.count(name) != 0; }

Tensor& ParamStore::at(const std::string& name) {
  auto it = map_.find(name);
  if (it == map_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second.tensor;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second.tensor;
}

ParamSet ParamStore::set_of(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return it->second.set;
}

std::vector<std::string> ParamStore::names_in(ParamSet set) const {
  std::vector<std::string> out;
  for (const auto& n : order_)
    if (map_.at(n).set == set) out.push_back(n);
  return out;
}

void ParamStore::zero_grads() {
  for (const auto& n : order_) map_.at(n).tensor.zero_grad();
}

void ParamStore::set_requires_grad(ParamSet set, bool v) {
  for (const auto& n : order_) {
    auto& e = map_.at(n);
    if (e.set == set) e.tensor.set_requires_grad(v);
  }
}

void ParamStore::set_requires_grad_all(bool v) {
  for (const auto& n : order_) map_.at(n).tensor.set_requires_grad(v);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& name : order_) n += map_.at(name).tensor.size();
  return n;
}

std::size_t ParamStore::scalar_count(ParamSet set) const {
  std::size_t n = 0;
  for (const auto& name : order_)
    if (map_.at(name).set == set) n += map_.at(name).tensor.size();
  return n;
}

std::uint64_t ParamStore::digest(ParamSet set) const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& name : order_) {
    const auto& e = map_.at(name);
    if (e.set != set) continue;
    h = digest_combine(h, digest_bytes(e.tensor.data()));
  }
  return h;
}

ParamGradGuard::ParamGradGuard(ParamStore& store) : store_(&store) {
  for (const auto& name : store.names()) {
    saved_.emplace_back(name, store.at(name).requires_grad());
    store.at(name).set_requires_grad(false);
  }
}

ParamGradGuard::~ParamGradGuard() {
  for (const auto& [name, flag] : saved_) store_->at(name).set_requires_grad(flag);
}

}  // namespace l2p

#include "l2p/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace l2p {

void SgdOptimizer::step(ParamStore& params, const std::vector<std::string>& names,
                        const SgdConfig& cfg) {
  for (const auto& name : names) {
    Tensor& p = params.at(name);
    if (!p.has_grad())
      throw std::runtime_error("sgd_step: parameter '" + name + "' has no gradient");
    auto& v = velocity_[name];
    if (v.size() != p.size()) {
      if (!v.empty())
        throw std::runtime_error("sgd_step: velocity shape mismatch for '" + name + "'");
      v.assign(p.size(), 0.0);
    }
    auto pd = p.raw_data();
    const auto gd = p.grad();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      const double g = gd[i] + cfg.weight_decay * pd[i];
      v[i] = cfg.momentum * v[i] + g;
      const double upd = cfg.nesterov ? g + cfg.momentum * v[i] : v[i];
      pd[i] -= cfg.lr * upd;
    }
  }
}

void SgdOptimizer::load_velocity(const std::string& name, std::vector<double> v) {
  velocity_[name] = std::move(v);
}

AdamVec::AdamVec(std::size_t n, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void AdamVec::step(std::vector<double>& x, std::span<const double> g) {
  if (x.size() != m_.size() || g.size() != m_.size())
    throw std::invalid_argument("AdamVec::step: size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < x.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
    x[i] -= lr_ * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + eps_);
  }
}

void AdamVec::reset() {
  t_ = 0;
  std::fill(m_.begin(), m_.end(), 0.0);
  std::fill(v_.begin(), v_.end(), 0.0);
}

}  // namespace l2p

#include "l2p/perturb.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "l2p/nn.hpp"
#include "l2p/ops.hpp"

namespace l2p {

Tensor PerturbationLayer::apply(const Tensor& features) {
  if (!enabled) return features;
  const auto& fs = features.shape();
  if (fs.size() < 2 || Shape(fs.begin() + 1, fs.end()) != theta.shape())
    throw std::invalid_argument("PerturbationLayer '" + name + "': features " + shape_str(fs) +
                                " do not host theta " + shape_str(theta.shape()));
  std::vector<double> z(features.size());
  for (auto& v : z) v = rng.normal();
  return inject_noise(features, theta, std::move(z));
}

void project_theta(PerturbationLayer& layer) {
  for (auto& v : layer.theta.raw_data()) v = std::max(v, layer.theta_min);
}

ThetaStats theta_stats(const PerturbationLayer& layer) {
  ThetaStats s;
  s.layer = layer.name;
  const auto d = layer.theta.data();
  s.min = d[0];
  s.max = d[0];
  double sum = 0.0;
  for (double v : d) {
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.mean = sum / static_cast<double>(d.size());
  return s;
}

std::vector<ThetaStats> theta_stats(const Model& model) {
  std::vector<ThetaStats> out;
  for (const auto& layer : model.perturb_layers()) out.push_back(theta_stats(layer));
  return out;
}

void append_theta_stats_csv(const std::string& path, int epoch,
                            const std::vector<ThetaStats>& stats) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot open theta stats csv: " + path);
  if (fresh) f << "epoch,layer,mean,min,max\n";
  f.precision(17);
  for (const auto& s : stats)
    f << epoch << "," << s.layer << "," << s.mean << "," << s.min << "," << s.max << "\n";
}

}  // namespace l2p

#include "l2p/nn.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "l2p/ops.hpp"

namespace l2p {

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::normalize(std::vector<double> mean, std::vector<double> stddev) {
  LayerSpec s;
  s.kind = LayerKind::kNormalize;
  s.mean = std::move(mean);
  s.stddev = std::move(stddev);
  return s;
}
LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::kConv;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}
LayerSpec LayerSpec::relu() {
  LayerSpec s;
  s.kind = LayerKind::kRelu;
  return s;
}
LayerSpec LayerSpec::avg_pool(int window, int stride) {
  LayerSpec s;
  s.kind = LayerKind::kAvgPool;
  s.window = window;
  s.stride = stride;
  return s;
}
LayerSpec LayerSpec::global_avg_pool() {
  LayerSpec s;
  s.kind = LayerKind::kGlobalAvgPool;
  return s;
}
LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::kFlatten;
  return s;
}
LayerSpec LayerSpec::linear(int out_dim) {
  LayerSpec s;
  s.kind = LayerKind::kLinear;
  s.out_channels = out_dim;
  return s;
}
LayerSpec LayerSpec::residual_v1(int out_channels, int stride) {
  LayerSpec s;
  s.kind = LayerKind::kResidualV1;
  s.out_channels = out_channels;
  s.kernel = 3;
  s.stride = stride;
  s.pad = 1;
  return s;
}
LayerSpec LayerSpec::residual_v2(int out_channels, int stride) {
  LayerSpec s = residual_v1(out_channels, stride);
  s.kind = LayerKind::kResidualV2;
  return s;
}
LayerSpec LayerSpec::perturb_slot() {
  LayerSpec s;
  s.kind = LayerKind::kPerturbSlot;
  return s;
}

namespace {

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoi(tok));
  }
  return out;
}

}  // namespace

std::string LayerSpec::to_text() const {
  std::ostringstream os;
  switch (kind) {
    case LayerKind::kNormalize:
      os << "normalize(" << join_doubles(mean) << "|" << join_doubles(stddev) << ")";
      break;
    case LayerKind::kConv:
      os << "conv(" << out_channels << "," << kernel << "," << stride << "," << pad << ")";
      break;
    case LayerKind::kRelu:
      os << "relu";
      break;
    case LayerKind::kAvgPool:
      os << "avgpool(" << window << "," << stride << ")";
      break;
    case LayerKind::kGlobalAvgPool:
      os << "gap";
      break;
    case LayerKind::kFlatten:
      os << "flatten";
      break;
    case LayerKind::kLinear:
      os << "linear(" << out_channels << ")";
      break;
    case LayerKind::kResidualV1:
      os << "resv1(" << out_channels << "," << stride << ")";
      break;
    case LayerKind::kResidualV2:
      os << "resv2(" << out_channels << "," << stride << ")";
      break;
    case LayerKind::kPerturbSlot:
      os << "perturb";
      break;
  }
  return os.str();
}

LayerSpec LayerSpec::from_text(const std::string& line) {
  const auto open = line.find('(');
  const std::string head = line.substr(0, open);
  std::string args;
  if (open != std::string::npos) {
    const auto close = line.rfind(')');
    if (close == std::string::npos || close < open)
      throw std::invalid_argument("layer spec: unbalanced parentheses in '" + line + "'");
    args = line.substr(open + 1, close - open - 1);
  }
  if (head == "normalize") {
    const auto bar = args.find('|');
    if (bar == std::string::npos)
      throw std::invalid_argument("layer spec: normalize needs 'means|stds' in '" + line + "'");
    return normalize(parse_doubles(args.substr(0, bar)), parse_doubles(args.substr(bar + 1)));
  }
  if (head == "conv") {
    auto v = parse_ints(args);
    if (v.size() != 4) throw std::invalid_argument("layer spec: conv needs 4 ints in '" + line + "'");
    return conv(v[0], v[1], v[2], v[3]);
  }
  if (head == "relu") return relu();
  if (head == "avgpool") {
    auto v = parse_ints(args);
    if (v.size() != 2)
      throw std::invalid_argument("layer spec: avgpool needs 2 ints in '" + line + "'");
    return avg_pool(v[0], v[1]);
  }
  if (head == "gap") return global_avg_pool();
  if (head == "flatten") return flatten();
  if (head == "linear") {
    auto v = parse_ints(args);
    if (v.size() != 1)
      throw std::invalid_argument("layer spec: linear needs 1 int in '" + line + "'");
    return linear(v[0]);
  }
  if (head == "resv1" || head == "resv2") {
    auto v = parse_ints(args);
    if (v.size() != 2)
      throw std::invalid_argument("layer spec: residual needs 2 ints in '" + line + "'");
    return head == "resv1" ? residual_v1(v[0], v[1]) : residual_v2(v[0], v[1]);
  }
  if (head == "perturb") return perturb_slot();
  throw std::invalid_argument("layer spec: unknown layer '" + line + "'");
}

std::string spec_to_text(const std::vector<LayerSpec>& spec) {
  std::string out;
  for (const auto& l : spec) {
    if (!out.empty()) out += ";";
    out += l.to_text();
  }
  return out;
}

std::vector<LayerSpec> spec_from_text(const std::string& text) {
  std::vector<LayerSpec> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ';')) {
    // trim
    while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\n')) tok.erase(tok.begin());
    while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\n')) tok.pop_back();
    if (tok.empty()) continue;
    out.push_back(LayerSpec::from_text(tok));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape walker

namespace {

struct Walk {
  Shape shape;  // per-sample
};

std::string layer_desc(std::size_t i, const LayerSpec& l) {
  return "layer " + std::to_string(i) + " (" + l.to_text() + ")";
}

[[noreturn]] void reject_pair(std::size_t i, const std::vector<LayerSpec>& spec,
                              const Shape& incoming, const std::string& why) {
  std::string prev = i == 0 ? std::string("the model input") : layer_desc(i - 1, spec[i - 1]);
  throw std::invalid_argument("build_model: " + layer_desc(i, spec[i]) + " cannot follow " + prev +
                              " producing " + shape_str(incoming) + ": " + why);
}

Shape apply_shape(std::size_t i, const std::vector<LayerSpec>& spec, const Shape& in) {
  const LayerSpec& l = spec[i];
  switch (l.kind) {
    case LayerKind::kNormalize: {
      if (i != 0)
        throw std::invalid_argument("build_model: " + layer_desc(i, spec[i]) +
                                    " must be the first layer");
      if (in.empty() || l.mean.size() != static_cast<std::size_t>(in[0]) ||
          l.stddev.size() != l.mean.size())
        reject_pair(i, spec, in, "per-channel constants do not match channel count");
      for (double s : l.stddev)
        if (s == 0.0) throw std::invalid_argument("build_model: normalize std must be non-zero");
      return in;
    }
    case LayerKind::kConv: {
      if (in.size() != 3) reject_pair(i, spec, in, "conv requires a [C,H,W] input");
      const int h = in[1], w = in[2];
      if (l.kernel > h + 2 * l.pad || l.kernel > w + 2 * l.pad)
        reject_pair(i, spec, in, "kernel exceeds padded input");
      return {l.out_channels, (h + 2 * l.pad - l.kernel) / l.stride + 1,
              (w + 2 * l.pad - l.kernel) / l.stride + 1};
    }
    case LayerKind::kRelu:
      return in;
    case LayerKind::kAvgPool: {
      if (in.size() != 3) reject_pair(i, spec, in, "avgpool requires a [C,H,W] input");
      if (l.window > in[1] || l.window > in[2]) reject_pair(i, spec, in, "window exceeds input");
      return {in[0], (in[1] - l.window) / l.stride + 1, (in[2] - l.window) / l.stride + 1};
    }
    case LayerKind::kGlobalAvgPool:
      if (in.size() != 3) reject_pair(i, spec, in, "gap requires a [C,H,W] input");
      return {in[0], 1, 1};
    case LayerKind::kFlatten: {
      int n = 1;
      for (int d : in) n *= d;
      return {n};
    }
    case LayerKind::kLinear:
      if (in.size() != 1) reject_pair(i, spec, in, "linear requires a flattened [D] input");
      return {l.out_channels};
    case LayerKind::kResidualV1:
    case LayerKind::kResidualV2: {
      if (in.size() != 3) reject_pair(i, spec, in, "residual block requires a [C,H,W] input");
      const int h = in[1], w = in[2];
      const int oh = (h + 2 - 3) / l.stride + 1;
      const int ow = (w + 2 - 3) / l.stride + 1;
      if (l.kind == LayerKind::kResidualV1 && l.out_channels < in[0])
        reject_pair(i, spec, in, "v1 shortcut cannot shrink channels");
      return {l.out_channels, oh, ow};
    }
    case LayerKind::kPerturbSlot:
      return in;
  }
  throw std::logic_error("unreachable layer kind");
}

}  // namespace

// ---------------------------------------------------------------------------
// Model

Model::Model(std::vector<LayerSpec> spec, Shape input_shape, std::uint64_t seed, double theta0,
             double theta_min)
    : spec_(std::move(spec)),
      input_shape_(std::move(input_shape)),
      theta0_(theta0),
      theta_min_(theta_min),
      seed_(seed) {
  if (spec_.empty()) throw std::invalid_argument("build_model: empty layer spec");
  if (theta_min_ < 0.0) throw std::invalid_argument("build_model: theta_min must be >= 0");
  shape_numel(input_shape_);  // validates positivity

  RngStream init_rng(derive_seed(seed_, "init"));
  auto he_tensor = [&](Shape shape, int fan_in) {
    return Tensor::randn(std::move(shape), init_rng, std::sqrt(2.0 / fan_in));
  };

  Shape cur = input_shape_;
  perturb_index_.assign(spec_.size(), -1);
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const Shape next = apply_shape(i, spec_, cur);
    const LayerSpec& l = spec_[i];
    const std::string pfx = "l" + std::to_string(i);
    switch (l.kind) {
      case LayerKind::kConv: {
        const int fan_in = cur[0] * l.kernel * l.kernel;
        params_.add(pfx + ".w", he_tensor({l.out_channels, cur[0], l.kernel, l.kernel}, fan_in),
                    ParamSet::kWeights);
        params_.add(pfx + ".b", Tensor::zeros({l.out_channels}), ParamSet::kWeights);
        break;
      }
      case LayerKind::kLinear: {
        params_.add(pfx + ".w", he_tensor({cur[0], l.out_channels}, cur[0]), ParamSet::kWeights);
        params_.add(pfx + ".b", Tensor::zeros({l.out_channels}), ParamSet::kWeights);
        break;
      }
      case LayerKind::kResidualV1:
      case LayerKind::kResidualV2: {
        const int fan1 = cur[0] * 9;
        const int fan2 = l.out_channels * 9;
        params_.add(pfx + ".conv1.w", he_tensor({l.out_channels, cur[0], 3, 3}, fan1),
                    ParamSet::kWeights);
        params_.add(pfx + ".conv1.b", Tensor::zeros({l.out_channels}), ParamSet::kWeights);
        params_.add(pfx + ".conv2.w", he_tensor({l.out_channels, l.out_channels, 3, 3}, fan2),
                    ParamSet::kWeights);
        params_.add(pfx + ".conv2.b", Tensor::zeros({l.out_channels}), ParamSet::kWeights);
        const bool reshaped = next != cur;
        if (l.kind == LayerKind::kResidualV2 && reshaped) {
          params_.add(pfx + ".shortcut.w", he_tensor({l.out_channels, cur[0], 1, 1}, cur[0]),
                      ParamSet::kWeights);
          params_.add(pfx + ".shortcut.b", Tensor::zeros({l.out_channels}), ParamSet::kWeights);
        }
        // built-in slot at the block output, before the final relu
        PerturbationLayer pl;
        pl.name = pfx + ".theta";
        pl.theta = params_.add(pfx + ".theta", Tensor::full(next, theta0_), ParamSet::kTheta);
        pl.theta_min = theta_min_;
        pl.enabled = false;
        pl.rng = RngStream(derive_seed(seed_, pl.name));
        perturb_index_[i] = static_cast<int>(perturb_.size());
        perturb_.push_back(std::move(pl));
        break;
      }
      case LayerKind::kPerturbSlot: {
        PerturbationLayer pl;
        pl.name = pfx + ".theta";
        pl.theta = params_.add(pfx + ".theta", Tensor::full(cur, theta0_), ParamSet::kTheta);
        pl.theta_min = theta_min_;
        pl.enabled = false;
        pl.rng = RngStream(derive_seed(seed_, pl.name));
        perturb_index_[i] = static_cast<int>(perturb_.size());
        perturb_.push_back(std::move(pl));
        break;
      }
      default:
        break;
    }
    cur = next;
  }
  if (cur.size() != 1)
    throw std::invalid_argument("build_model: final layer must produce class logits [K], got " +
                                shape_str(cur));
  num_classes_ = cur[0];
}

Model build_model(std::vector<LayerSpec> spec, Shape input_shape, std::uint64_t seed,
                  double theta0, double theta_min) {
  return Model(std::move(spec), std::move(input_shape), seed, theta0, theta_min);
}

Model Model::clone() const {
  Model m(spec_, input_shape_, seed_, theta0_, theta_min_);
  for (const auto& name : params_.names()) {
    auto src = params_.at(name).data();
    auto dst = m.params_.at(name).raw_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  for (std::size_t i = 0; i < perturb_.size(); ++i) {
    m.perturb_[i].enabled = perturb_[i].enabled;
    m.perturb_[i].theta_min = perturb_[i].theta_min;
    m.perturb_[i].rng = RngStream::deserialize(perturb_[i].rng.serialize());
  }
  return m;
}

Tensor Model::forward(const Tensor& x, bool noise) {
  const auto& xs = x.shape();
  Shape expect = input_shape_;
  expect.insert(expect.begin(), xs.empty() ? 0 : xs[0]);
  if (xs.size() != expect.size() || !std::equal(xs.begin() + 1, xs.end(), expect.begin() + 1))
    throw std::invalid_argument("forward: input " + shape_str(xs) + " does not match model input " +
                                shape_str(input_shape_) + " (batched)");

  Tensor h = x;
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const LayerSpec& l = spec_[i];
    const std::string pfx = "l" + std::to_string(i);
    switch (l.kind) {
      case LayerKind::kNormalize: {
        std::vector<double> sc(l.mean.size()), sh(l.mean.size());
        for (std::size_t c = 0; c < sc.size(); ++c) {
          sc[c] = 1.0 / l.stddev[c];
          sh[c] = -l.mean[c] / l.stddev[c];
        }
        h = channel_affine(h, std::move(sc), std::move(sh));
        break;
      }
      case LayerKind::kConv:
        h = bias_add(conv2d(h, params_.at(pfx + ".w"), l.stride, l.pad), params_.at(pfx + ".b"));
        break;
      case LayerKind::kRelu:
        h = relu(h);
        break;
      case LayerKind::kAvgPool:
        h = avg_pool(h, l.window, l.stride);
        break;
      case LayerKind::kGlobalAvgPool:
        h = avg_pool(h, h.dim(2), h.dim(2));
        break;
      case LayerKind::kFlatten:
        h = flatten(h);
        break;
      case LayerKind::kLinear:
        h = bias_add(matmul(h, params_.at(pfx + ".w")), params_.at(pfx + ".b"));
        break;
      case LayerKind::kResidualV1:
      case LayerKind::kResidualV2: {
        Tensor y = bias_add(conv2d(h, params_.at(pfx + ".conv1.w"), l.stride, 1),
                            params_.at(pfx + ".conv1.b"));
        y = relu(y);
        y = bias_add(conv2d(y, params_.at(pfx + ".conv2.w"), 1, 1), params_.at(pfx + ".conv2.b"));
        Tensor sc = h;
        if (y.shape() != h.shape()) {
          if (l.kind == LayerKind::kResidualV2) {
            sc = bias_add(conv2d(h, params_.at(pfx + ".shortcut.w"), l.stride, 0),
                          params_.at(pfx + ".shortcut.b"));
          } else {
            if (l.stride > 1) {
              // window chosen so the pooled size matches the conv path
              const int win = h.dim(2) - l.stride * (y.dim(2) - 1);
              sc = avg_pool(sc, win, l.stride);
            }
            if (y.dim(1) != sc.dim(1)) sc = pad_channels(sc, y.dim(1));
          }
        }
        Tensor out = add(y, sc);
        if (noise) out = perturb_[static_cast<std::size_t>(perturb_index_[i])].apply(out);
        h = relu(out);
        break;
      }
      case LayerKind::kPerturbSlot:
        if (noise) h = perturb_[static_cast<std::size_t>(perturb_index_[i])].apply(h);
        break;
    }
  }
  return h;
}

void Model::set_noise_enabled(bool on) {
  for (auto& pl : perturb_) pl.enabled = on;
}

bool Model::has_enabled_noise() const {
  for (const auto& pl : perturb_)
    if (pl.enabled) return true;
  return false;
}

std::string Model::spec_text() const { return spec_to_text(spec_); }

std::uint64_t Model::spec_hash() const {
  const std::string text = spec_text() + "#" + shape_str(input_shape_);
  std::uint64_t h = 1469598103934665603ull;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

void Model::seed_noise_streams(std::uint64_t seed) {
  for (auto& pl : perturb_) pl.rng = RngStream(derive_seed(seed, pl.name));
}

// ---------------------------------------------------------------------------
// Families

std::vector<LayerSpec> mini_v1_spec(int base_channels, int blocks_per_stage, int classes,
                                    int stem_stride, std::vector<double> norm_mean,
                                    std::vector<double> norm_std) {
  std::vector<LayerSpec> s;
  if (!norm_mean.empty()) s.push_back(LayerSpec::normalize(norm_mean, norm_std));
  s.push_back(LayerSpec::conv(base_channels, 3, stem_stride, 1));
  s.push_back(LayerSpec::relu());
  for (int stage = 0; stage < 3; ++stage) {
    const int ch = base_channels << stage;
    for (int b = 0; b < blocks_per_stage; ++b) {
      const int stride = (stage > 0 && b == 0) ? 2 : 1;
      s.push_back(LayerSpec::residual_v1(ch, stride));
    }
  }
  s.push_back(LayerSpec::global_avg_pool());
  s.push_back(LayerSpec::flatten());
  s.push_back(LayerSpec::linear(classes));
  return s;
}

std::vector<LayerSpec> mini_v2_spec(int base_channels, int blocks_per_stage, int classes,
                                    int stem_stride, std::vector<double> norm_mean,
                                    std::vector<double> norm_std) {
  auto s = mini_v1_spec(base_channels, blocks_per_stage, classes, stem_stride,
                        std::move(norm_mean), std::move(norm_std));
  for (auto& l : s)
    if (l.kind == LayerKind::kResidualV1) l.kind = LayerKind::kResidualV2;
  return s;
}

std::vector<LayerSpec> mlp_spec(const std::vector<int>& widths, bool perturb_slots) {
  if (widths.size() < 2) throw std::invalid_argument("mlp_spec: need at least in/out widths");
  std::vector<LayerSpec> s;
  for (std::size_t i = 1; i < widths.size(); ++i) {
    s.push_back(LayerSpec::linear(widths[i]));
    if (i + 1 < widths.size()) {
      s.push_back(LayerSpec::relu());
      if (perturb_slots) s.push_back(LayerSpec::perturb_slot());
    }
  }
  return s;
}

}  // namespace l2p

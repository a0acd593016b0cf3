#include "l2p/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "l2p/ops.hpp"
#include "l2p/optim.hpp"

namespace l2p {

std::string AttackConfig::name() const {
  struct Visitor {
    std::string operator()(const FgsmConfig&) const { return "fgsm"; }
    std::string operator()(const PgdConfig&) const { return "pgd"; }
    std::string operator()(const CwConfig&) const { return "cw"; }
    std::string operator()(const FewPixelConfig&) const { return "fewpixel"; }
    std::string operator()(const EotConfig& e) const {
      return e.single_step ? "eot-fgsm" : "eot-pgd";
    }
  };
  return std::visit(Visitor{}, v);
}

void AttackConfig::validate() const {
  struct Visitor {
    void operator()(const FgsmConfig& c) const {
      if (c.eps < 0) throw std::invalid_argument("fgsm: eps must be >= 0");
    }
    void operator()(const PgdConfig& c) const {
      if (c.eps < 0 || c.steps < 1 || c.step_size < 0)
        throw std::invalid_argument("pgd: need eps >= 0, steps >= 1, step_size >= 0");
    }
    void operator()(const CwConfig& c) const {
      if (!(c.c_lo < c.c_hi) || c.binary_steps < 1 || c.max_iters < 1 || c.lr <= 0 || c.kappa < 0)
        throw std::invalid_argument("cw: need c_lo < c_hi, positive steps/iters/lr, kappa >= 0");
    }
    void operator()(const FewPixelConfig& c) const {
      if (c.k < 1 || c.pop_size < 4 || c.max_gens < 1)
        throw std::invalid_argument("fewpixel: need k >= 1, pop_size >= 4, max_gens >= 1");
    }
    void operator()(const EotConfig& c) const {
      if (c.samples < 1) throw std::invalid_argument("eot: samples must be >= 1");
      AttackConfig inner{c.inner};
      inner.validate();
    }
  };
  std::visit(Visitor{}, v);
}

void fill_distortion(AdvExample& ex, const Tensor& x0) {
  if (ex.x_adv.shape() != x0.shape())
    throw std::invalid_argument("fill_distortion: shape mismatch " + shape_str(ex.x_adv.shape()) +
                                " vs " + shape_str(x0.shape()));
  const auto a = ex.x_adv.data();
  const auto b = x0.data();
  double linf = 0.0, l2sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    linf = std::max(linf, std::abs(d));
    l2sq += d * d;
  }
  ex.linf = linf;
  ex.l2 = std::sqrt(l2sq);

  int changed = 0;
  const auto& s = x0.shape();
  if (s.size() == 3) {  // [C,H,W]: a pixel is one (h,w) position across channels
    const int C = s[0], H = s[1], W = s[2];
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        bool diff = false;
        for (int c = 0; c < C && !diff; ++c)
          diff = a[(static_cast<std::size_t>(c) * H + i) * W + j] !=
                 b[(static_cast<std::size_t>(c) * H + i) * W + j];
        if (diff) ++changed;
      }
  } else {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] != b[i]) ++changed;
  }
  ex.pixels_changed = changed;
}

// ---------------------------------------------------------------------------
// Gradients

Tensor input_gradient(Model& model, const Tensor& x, const std::vector<int>& targets) {
  ParamGradGuard off(model.params());
  Tensor xin = x.detached();
  xin.set_requires_grad(true);
  backward(softmax_cross_entropy(model.forward(xin, true), targets));
  return Tensor::from_data(x.shape(), {xin.grad().begin(), xin.grad().end()});
}

Tensor eot_gradient(Model& model, const Tensor& x, const std::vector<int>& targets,
                    int k_samples) {
  if (k_samples < 1) throw std::invalid_argument("eot_gradient: k_samples must be >= 1");
  Tensor first = input_gradient(model, x, targets);
  if (k_samples == 1) return first;
  std::vector<double> dev(first.size(), 0.0);
  for (int k = 1; k < k_samples; ++k) {
    Tensor g = input_gradient(model, x, targets);
    const auto gd = g.data();
    const auto fd = first.data();
    for (std::size_t i = 0; i < dev.size(); ++i) dev[i] += gd[i] - fd[i];
  }
  std::vector<double> out(first.data().begin(), first.data().end());
  const double inv = 1.0 / static_cast<double>(k_samples);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += dev[i] * inv;
  return Tensor::from_data(x.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// FGSM / PGD

namespace {

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Clamp one value into the linf ball around x0 intersected with [0,1], with a
// nextafter fix-up so the recomputed difference satisfies |v - x0| <= eps in
// floating point, exactly.
inline double project_elem(double v, double x0, double eps) {
  v = std::min(std::max(v, x0 - eps), x0 + eps);
  v = std::min(std::max(v, 0.0), 1.0);
  while (v - x0 > eps) v = std::nextafter(v, x0);
  while (v - x0 < -eps) v = std::nextafter(v, x0);
  return v;
}

template <typename GradFn>
Tensor pgd_core(const Tensor& x, const PgdConfig& cfg, RngStream& rng, GradFn&& grad_fn) {
  const auto x0 = x.data();
  std::vector<double> cur(x0.begin(), x0.end());
  if (cfg.random_start && cfg.eps > 0.0) {
    for (std::size_t i = 0; i < cur.size(); ++i)
      cur[i] = project_elem(cur[i] + rng.uniform(-cfg.eps, cfg.eps), x0[i], cfg.eps);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor xt = Tensor::from_data(x.shape(), cur);
    Tensor g = grad_fn(xt);
    const auto gd = g.data();
    for (std::size_t i = 0; i < cur.size(); ++i)
      cur[i] = project_elem(cur[i] + cfg.step_size * sign0(gd[i]), x0[i], cfg.eps);
  }
  return Tensor::from_data(x.shape(), std::move(cur));
}

}  // namespace

Tensor pgd_batch(Model& model, const Tensor& x, const std::vector<int>& targets,
                 const PgdConfig& cfg, RngStream& rng) {
  AttackConfig{cfg}.validate();
  return pgd_core(x, cfg, rng,
                  [&](const Tensor& xt) { return input_gradient(model, xt, targets); });
}

Tensor fgsm_batch(Model& model, const Tensor& x, const std::vector<int>& targets, double eps) {
  // one eps-sized PGD step with no random start; shares the exact code path so
  // the reduction PGD(1, eps, no start) == FGSM(eps) holds bitwise
  PgdConfig cfg{.eps = eps, .steps = 1, .step_size = eps, .random_start = false};
  RngStream unused(0);
  return pgd_batch(model, x, targets, cfg, unused);
}

Tensor eot_pgd_batch(Model& model, const Tensor& x, const std::vector<int>& targets,
                     const EotConfig& cfg, RngStream& rng) {
  AttackConfig{cfg}.validate();
  PgdConfig inner = cfg.inner;
  if (cfg.single_step) {
    inner.steps = 1;
    inner.step_size = inner.eps;
    inner.random_start = false;
  }
  return pgd_core(x, inner, rng, [&](const Tensor& xt) {
    return eot_gradient(model, xt, targets, cfg.samples);
  });
}

namespace {

Tensor with_batch_dim(const Tensor& x1) {
  Shape s = x1.shape();
  s.insert(s.begin(), 1);
  return Tensor::from_data(std::move(s), {x1.data().begin(), x1.data().end()});
}

Tensor drop_batch_dim(const Tensor& xb) {
  Shape s(xb.shape().begin() + 1, xb.shape().end());
  return Tensor::from_data(std::move(s), {xb.data().begin(), xb.data().end()});
}

int predict_one(Model& model, const Tensor& x1) {
  NoGradGuard ng;
  return argmax_rows(model.forward(with_batch_dim(x1), true))[0];
}

AdvExample finish_example(Model& model, const Tensor& x1, Tensor x_adv, int target) {
  AdvExample ex;
  ex.x_adv = std::move(x_adv);
  ex.success = predict_one(model, ex.x_adv) != target;
  fill_distortion(ex, x1);
  return ex;
}

}  // namespace

AdvExample fgsm(Model& model, const Tensor& x1, int target, double eps, RngStream&) {
  auto xb = with_batch_dim(x1);
  return finish_example(model, x1, drop_batch_dim(fgsm_batch(model, xb, {target}, eps)), target);
}

AdvExample pgd(Model& model, const Tensor& x1, int target, const PgdConfig& cfg, RngStream& rng) {
  auto xb = with_batch_dim(x1);
  return finish_example(model, x1, drop_batch_dim(pgd_batch(model, xb, {target}, cfg, rng)),
                        target);
}

// ---------------------------------------------------------------------------
// C&W (l2)

AdvExample cw_l2(Model& model, const Tensor& x1, int target, const CwConfig& cfg, RngStream&) {
  AttackConfig{cfg}.validate();
  const auto x0 = x1.data();
  const std::size_t n = x0.size();

  // box change of variables: x' = (tanh(w) + 1)/2
  std::vector<double> w0(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = std::clamp(2.0 * x0[i] - 1.0, -1.0 + 1e-6, 1.0 - 1e-6);
    w0[i] = std::atanh(t);
  }

  Tensor x_orig = x1.detached();
  double best_l2 = std::numeric_limits<double>::infinity();
  Tensor best_adv;
  double best_margin = std::numeric_limits<double>::infinity();
  Tensor best_attempt;

  double lo = cfg.c_lo, hi = cfg.c_hi;
  for (int bs = 0; bs < cfg.binary_steps; ++bs) {
    const double c = std::sqrt(lo * hi);  // geometric midpoint over a wide range
    std::vector<double> w = w0;
    AdamVec adam(n, cfg.lr);
    bool success_at_c = false;
    double stall_best = std::numeric_limits<double>::infinity();
    int stall = 0;
    for (int iter = 0; iter < cfg.max_iters; ++iter) {
      Tensor wt = Tensor::from_data(x1.shape(), w, true);
      Tensor x_adv = affine(tanh_op(wt), 0.5, 0.5);
      Tensor delta = sub(x_adv, x_orig);
      Tensor margin;
      {
        ParamGradGuard off(model.params());
        Shape bs1 = x1.shape();
        bs1.insert(bs1.begin(), 1);
        Tensor logits = model.forward(reshape(x_adv, bs1), true);
        margin = cw_margin(logits, target, cfg.kappa);
        Tensor obj = add(sum(mul(delta, delta)), scale(margin, c));
        backward(obj);
        const double cur = obj.item();
        if (cur < stall_best - 1e-9) {
          stall_best = cur;
          stall = 0;
        } else if (++stall > 100) {
          break;
        }
      }
      // margin at the floor -kappa means misclassified with the required margin
      const double mval = margin.item();
      if (mval < best_margin) {
        best_margin = mval;
        best_attempt = x_adv.detached();
      }
      if (mval <= -cfg.kappa) {
        success_at_c = true;
        double l2sq = 0.0;
        const auto a = x_adv.data();
        for (std::size_t i = 0; i < n; ++i) {
          const double d = a[i] - x0[i];
          l2sq += d * d;
        }
        if (l2sq < best_l2 * best_l2) {
          best_l2 = std::sqrt(l2sq);
          best_adv = x_adv.detached();
        }
      }
      adam.step(w, wt.grad());
    }
    if (success_at_c)
      hi = c;
    else
      lo = c;
  }

  AdvExample ex;
  if (best_adv.defined()) {
    ex.x_adv = best_adv;
    ex.success = true;
  } else {
    ex.x_adv = best_attempt.defined() ? best_attempt : x1.detached();
    ex.success = false;
  }
  // keep the output inside the exact box (tanh already guarantees it)
  for (auto& v : ex.x_adv.raw_data()) v = std::min(std::max(v, 0.0), 1.0);
  fill_distortion(ex, x1);
  return ex;
}

// ---------------------------------------------------------------------------
// Few-pixel via differential evolution (rand/1/bin)

namespace {

struct PixelCand {
  std::vector<double> genes;  // k * (2 + C): row, col, per-channel color
};

Tensor apply_pixels(const Tensor& x1, const PixelCand& cand, int k, int channels, int h, int w) {
  std::vector<double> px(x1.data().begin(), x1.data().end());
  const int per = 2 + channels;
  for (int t = 0; t < k; ++t) {
    const double* g = cand.genes.data() + static_cast<std::size_t>(t) * per;
    const int row = std::clamp(static_cast<int>(std::lround(g[0])), 0, h - 1);
    const int col = std::clamp(static_cast<int>(std::lround(g[1])), 0, w - 1);
    for (int c = 0; c < channels; ++c)
      px[(static_cast<std::size_t>(c) * h + row) * w + col] = std::clamp(g[2 + c], 0.0, 1.0);
  }
  return Tensor::from_data(x1.shape(), std::move(px));
}

// true-class probabilities for a population, batched through the model
std::vector<double> population_fitness(Model& model, const Tensor& x1,
                                       const std::vector<PixelCand>& pop, int target, int k,
                                       int channels, int h, int w) {
  NoGradGuard ng;
  std::vector<double> fit(pop.size());
  const std::size_t stride = x1.size();
  constexpr std::size_t kChunk = 128;
  for (std::size_t start = 0; start < pop.size(); start += kChunk) {
    const std::size_t m = std::min(kChunk, pop.size() - start);
    std::vector<double> batch(m * stride);
    for (std::size_t i = 0; i < m; ++i) {
      Tensor xi = apply_pixels(x1, pop[start + i], k, channels, h, w);
      std::copy(xi.data().begin(), xi.data().end(), batch.begin() + i * stride);
    }
    Shape bshape = x1.shape();
    bshape.insert(bshape.begin(), static_cast<int>(m));
    Tensor logits = model.forward(Tensor::from_data(std::move(bshape), std::move(batch)), true);
    const int classes = logits.dim(1);
    for (std::size_t i = 0; i < m; ++i) {
      auto probs = softmax_row(logits.data().subspan(i * classes, classes));
      fit[start + i] = probs[static_cast<std::size_t>(target)];
    }
  }
  return fit;
}

}  // namespace

AdvExample few_pixel(Model& model, const Tensor& x1, int target, const FewPixelConfig& cfg) {
  AttackConfig{cfg}.validate();
  const auto& s = x1.shape();
  if (s.size() != 3)
    throw std::invalid_argument("few_pixel: expected a [C,H,W] sample, got " + shape_str(s));
  const int channels = s[0], h = s[1], w = s[2];
  const int per = 2 + channels;
  RngStream rng(derive_seed(cfg.seed, "fewpixel"));

  std::vector<PixelCand> pop(static_cast<std::size_t>(cfg.pop_size));
  for (auto& cand : pop) {
    cand.genes.resize(static_cast<std::size_t>(cfg.k) * per);
    for (int t = 0; t < cfg.k; ++t) {
      cand.genes[static_cast<std::size_t>(t) * per + 0] = rng.uniform(0.0, h - 1.0);
      cand.genes[static_cast<std::size_t>(t) * per + 1] = rng.uniform(0.0, w - 1.0);
      for (int c = 0; c < channels; ++c)
        cand.genes[static_cast<std::size_t>(t) * per + 2 + c] = rng.uniform();
    }
  }
  auto fit = population_fitness(model, x1, pop, target, cfg.k, channels, h, w);

  auto best_idx = [&]() {
    return static_cast<std::size_t>(
        std::min_element(fit.begin(), fit.end()) - fit.begin());
  };

  auto check_success = [&](const PixelCand& cand) {
    NoGradGuard ng;
    Tensor xi = apply_pixels(x1, cand, cfg.k, channels, h, w);
    Shape bshape = x1.shape();
    bshape.insert(bshape.begin(), 1);
    Tensor logits = model.forward(
        Tensor::from_data(std::move(bshape), {xi.data().begin(), xi.data().end()}), true);
    return argmax_rows(logits)[0] != target;
  };

  bool success = false;
  for (int gen = 0; gen < cfg.max_gens && !success; ++gen) {
    std::vector<PixelCand> trials(pop.size());
    for (std::size_t i = 0; i < pop.size(); ++i) {
      std::size_t a, b, c;
      do a = static_cast<std::size_t>(rng.uniform_int(0, cfg.pop_size - 1)); while (a == i);
      do b = static_cast<std::size_t>(rng.uniform_int(0, cfg.pop_size - 1));
      while (b == i || b == a);
      do c = static_cast<std::size_t>(rng.uniform_int(0, cfg.pop_size - 1));
      while (c == i || c == a || c == b);
      PixelCand trial = pop[i];
      const std::size_t dims = trial.genes.size();
      const std::size_t j_rand = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(dims) - 1));
      for (std::size_t d = 0; d < dims; ++d) {
        if (d == j_rand || rng.uniform() < cfg.de_cr) {
          trial.genes[d] = pop[a].genes[d] + cfg.de_f * (pop[b].genes[d] - pop[c].genes[d]);
        }
      }
      for (int t = 0; t < cfg.k; ++t) {
        double* g = trial.genes.data() + static_cast<std::size_t>(t) * per;
        g[0] = std::clamp(g[0], 0.0, h - 1.0);
        g[1] = std::clamp(g[1], 0.0, w - 1.0);
        for (int ch = 0; ch < channels; ++ch) g[2 + ch] = std::clamp(g[2 + ch], 0.0, 1.0);
      }
      trials[i] = std::move(trial);
    }
    auto trial_fit = population_fitness(model, x1, trials, target, cfg.k, channels, h, w);
    for (std::size_t i = 0; i < pop.size(); ++i) {
      if (trial_fit[i] <= fit[i]) {
        pop[i] = std::move(trials[i]);
        fit[i] = trial_fit[i];
      }
    }
    success = check_success(pop[best_idx()]);
  }

  AdvExample ex;
  ex.x_adv = apply_pixels(x1, pop[best_idx()], cfg.k, channels, h, w);
  ex.success = check_success(pop[best_idx()]);
  fill_distortion(ex, x1);
  return ex;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

double accuracy(Model& model, const Dataset& ds, int batch_size) {
  NoGradGuard ng;
  const std::size_t n = ds.count();
  std::size_t correct = 0;
  BatchPlan plan{.batch_size = batch_size, .shuffle_seed = 0, .flip = false, .pad_crop = false};
  BatchIterator it(ds, plan, 0);
  Tensor x;
  std::vector<int> y;
  while (it.next(x, y)) {
    auto pred = argmax_rows(model.forward(x, true));
    for (std::size_t i = 0; i < y.size(); ++i)
      if (pred[i] == y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

namespace {

Tensor craft_batch(Model& model, const Tensor& x, const std::vector<int>& y,
                   const AttackConfig& attack, RngStream& rng) {
  struct Visitor {
    Model& model;
    const Tensor& x;
    const std::vector<int>& y;
    RngStream& rng;
    Tensor operator()(const FgsmConfig& c) { return fgsm_batch(model, x, y, c.eps); }
    Tensor operator()(const PgdConfig& c) { return pgd_batch(model, x, y, c, rng); }
    Tensor operator()(const EotConfig& c) { return eot_pgd_batch(model, x, y, c, rng); }
    Tensor operator()(const CwConfig& c) {
      std::vector<double> out(x.data().begin(), x.data().end());
      const std::size_t stride = x.size() / static_cast<std::size_t>(x.dim(0));
      for (int i = 0; i < x.dim(0); ++i) {
        Shape sshape(x.shape().begin() + 1, x.shape().end());
        Tensor xi = Tensor::from_data(
            sshape, {x.data().begin() + i * stride, x.data().begin() + (i + 1) * stride});
        auto ex = cw_l2(model, xi, y[static_cast<std::size_t>(i)], c, rng);
        std::copy(ex.x_adv.data().begin(), ex.x_adv.data().end(), out.begin() + i * stride);
      }
      return Tensor::from_data(x.shape(), std::move(out));
    }
    Tensor operator()(const FewPixelConfig& c) {
      std::vector<double> out(x.data().begin(), x.data().end());
      const std::size_t stride = x.size() / static_cast<std::size_t>(x.dim(0));
      for (int i = 0; i < x.dim(0); ++i) {
        Shape sshape(x.shape().begin() + 1, x.shape().end());
        Tensor xi = Tensor::from_data(
            sshape, {x.data().begin() + i * stride, x.data().begin() + (i + 1) * stride});
        FewPixelConfig ci = c;
        ci.seed = rng.next_u64();
        auto ex = few_pixel(model, xi, y[static_cast<std::size_t>(i)], ci);
        std::copy(ex.x_adv.data().begin(), ex.x_adv.data().end(), out.begin() + i * stride);
      }
      return Tensor::from_data(x.shape(), std::move(out));
    }
  };
  return std::visit(Visitor{model, x, y, rng}, attack.v);
}

}  // namespace

double robust_accuracy(Model& model, const Dataset& ds, const AttackConfig& attack,
                       RngStream& rng, int batch_size) {
  const std::size_t n = ds.count();
  std::size_t correct = 0;
  BatchPlan plan{.batch_size = batch_size, .shuffle_seed = 0, .flip = false, .pad_crop = false};
  BatchIterator it(ds, plan, 0);
  Tensor x;
  std::vector<int> y;
  while (it.next(x, y)) {
    Tensor x_adv = craft_batch(model, x, y, attack, rng);
    NoGradGuard ng;
    auto pred = argmax_rows(model.forward(x_adv, true));
    for (std::size_t i = 0; i < y.size(); ++i)
      if (pred[i] == y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

AccuracySummary summarize(const std::vector<double>& runs) {
  AccuracySummary s;
  s.runs = runs;
  if (runs.empty()) return s;
  double sum = 0.0;
  for (double r : runs) sum += r;
  s.mean = sum / static_cast<double>(runs.size());
  if (runs.size() > 1) {
    double sq = 0.0;
    for (double r : runs) sq += (r - s.mean) * (r - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(runs.size()));
  }
  return s;
}

AccuracySummary transfer_eval(Model& source, Model& victim, const Dataset& ds,
                              const AttackConfig& attack, int repeats, std::uint64_t attack_seed,
                              int batch_size) {
  if (source.input_shape() != victim.input_shape() ||
      source.num_classes() != victim.num_classes())
    throw std::invalid_argument("transfer_eval: source and victim dimensions differ");
  std::vector<double> runs;
  for (int r = 0; r < repeats; ++r) {
    RngStream rng(derive_seed(attack_seed, "transfer-attack"));  // reset per repeat
    const std::size_t n = ds.count();
    std::size_t correct = 0;
    BatchPlan plan{.batch_size = batch_size, .shuffle_seed = 0, .flip = false, .pad_crop = false};
    BatchIterator it(ds, plan, 0);
    Tensor x;
    std::vector<int> y;
    while (it.next(x, y)) {
      Tensor x_adv = craft_batch(source, x, y, attack, rng);
      NoGradGuard ng;
      auto pred = argmax_rows(victim.forward(x_adv, true));
      for (std::size_t i = 0; i < y.size(); ++i)
        if (pred[i] == y[i]) ++correct;
    }
    runs.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  return summarize(runs);
}

}  // namespace l2p

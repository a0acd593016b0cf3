#pragma once

// Shared test oracles, kept independent of the implementation paths they
// check: central finite differences, naive loop references for matmul/conv,
// and small statistics helpers.

#include <cmath>
#include <functional>
#include <vector>

#include "l2p/ops.hpp"
#include "l2p/tensor.hpp"

namespace testutil {

// Max over elements of |autodiff - finite diff| / (|finite diff| + 1e-8).
// `make_loss` must rebuild the whole graph from the leaf values each call.
inline double finite_diff_max_rel_err(l2p::Tensor& leaf,
                                      const std::function<double()>& loss_value,
                                      std::span<const double> autodiff_grad, double h = 1e-5) {
  double worst = 0.0;
  auto vals = leaf.raw_data();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double up = loss_value();
    vals[i] = orig - h;
    const double dn = loss_value();
    vals[i] = orig;
    const double fd = (up - dn) / (2.0 * h);
    const double err = std::abs(autodiff_grad[i] - fd) / (std::abs(fd) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j)
        c[static_cast<std::size_t>(i) * n + j] +=
            a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
  return c;
}

// Direct sliding-window convolution, one sample at a time.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, const std::vector<double>& w,
                                        int batch, int ci, int h, int wd, int co, int kh, int kw,
                                        int stride, int pad) {
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(batch) * co * oh * ow, 0.0);
  for (int n = 0; n < batch; ++n)
    for (int f = 0; f < co; ++f)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double s = 0.0;
          for (int c = 0; c < ci; ++c)
            for (int a = 0; a < kh; ++a)
              for (int b = 0; b < kw; ++b) {
                const int ih = i * stride - pad + a;
                const int iw = j * stride - pad + b;
                if (ih < 0 || ih >= h || iw < 0 || iw >= wd) continue;
                s += x[((static_cast<std::size_t>(n) * ci + c) * h + ih) * wd + iw] *
                     w[((static_cast<std::size_t>(f) * ci + c) * kh + a) * kw + b];
              }
          out[((static_cast<std::size_t>(n) * co + f) * oh + i) * ow + j] = s;
        }
  return out;
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double stddev(std::span<const double> v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline l2p::Tensor random_tensor(l2p::Shape shape, l2p::RngStream& rng, bool requires_grad,
                                 double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(l2p::shape_numel(shape));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return l2p::Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

}  // namespace testutil

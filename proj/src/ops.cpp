#include "l2p/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace l2p {

using detail::TensorImpl;
using detail::make_result;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

void accum(TensorImpl& dst, std::span<const double> src) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < src.size(); ++i) dst.grad[i] += src[i];
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       if (ai->needs_grad) accum(*ai, {self.grad.data(), self.grad.size()});
                       if (bi->needs_grad) accum(*bi, {self.grad.data(), self.grad.size()});
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       if (ai->needs_grad) accum(*ai, {self.grad.data(), self.grad.size()});
                       if (bi->needs_grad) {
                         bi->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           bi->grad[i] -= self.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result(a.shape(), std::move(out), {a, b},
                     [ai = a.impl(), bi = b.impl()](TensorImpl& self) {
                       if (ai->needs_grad) {
                         ai->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           ai->grad[i] += self.grad[i] * bi->data[i];
                       }
                       if (bi->needs_grad) {
                         bi->ensure_grad();
                         for (std::size_t i = 0; i < self.grad.size(); ++i)
                           bi->grad[i] += self.grad[i] * ai->data[i];
                       }
                     });
}

Tensor affine(const Tensor& x, double mul_c, double add_c) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mul_c * dx[i] + add_c;
  return make_result(x.shape(), std::move(out), {x}, [xi = x.impl(), mul_c](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += mul_c * self.grad[i];
  });
}

Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > 0.0 ? dx[i] : 0.0;
  return make_result(x.shape(), std::move(out), {x}, [xi = x.impl()](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xi->data[i] > 0.0) xi->grad[i] += self.grad[i];
  });
}

Tensor tanh_op(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(dx[i]);
  return make_result(x.shape(), std::move(out), {x}, [xi = x.impl()](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double t = self.data[i];
      xi->grad[i] += self.grad[i] * (1.0 - t * t);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({1}, {s}, {x}, [xi = x.impl()](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    const double g = self.grad[0];
    for (auto& v : xi->grad) v += g;
  });
}

Tensor sqrt_clamped(const Tensor& x, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("sqrt_clamped: eps must be positive");
  std::vector<double> out(x.size());
  const auto dx = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(std::max(dx[i], eps));
  return make_result(x.shape(), std::move(out), {x}, [xi = x.impl(), eps](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      xi->grad[i] += self.grad[i] * 0.5 / std::sqrt(std::max(xi->data[i], eps));
  });
}

// ---------------------------------------------------------------------------
// Structure

Tensor flatten(const Tensor& x) {
  if (x.shape().size() < 2)
    throw std::invalid_argument("flatten: need at least 2 dims, got " + shape_str(x.shape()));
  const int batch = x.shape()[0];
  const int rest = static_cast<int>(x.size()) / batch;
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result({batch, rest}, std::move(out), {x}, [xi = x.impl()](TensorImpl& self) {
    if (!xi->needs_grad) return;
    accum(*xi, {self.grad.data(), self.grad.size()});
  });
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(new_shape), std::move(out), {x}, [xi = x.impl()](TensorImpl& self) {
    if (!xi->needs_grad) return;
    accum(*xi, {self.grad.data(), self.grad.size()});
  });
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  if (b.shape().size() != 1 || xs.size() < 2 || xs[1] != b.shape()[0])
    throw std::invalid_argument("bias_add: shape mismatch " + shape_str(xs) + " vs " +
                                shape_str(b.shape()));
  const int batch = xs[0];
  const int channels = xs[1];
  const std::size_t inner = x.size() / static_cast<std::size_t>(batch * channels);
  std::vector<double> out(x.size());
  const auto dx = x.data();
  const auto db = b.data();
  std::size_t idx = 0;
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const double bv = db[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < inner; ++i, ++idx) out[idx] = dx[idx] + bv;
    }
  return make_result(xs, std::move(out), {x, b},
                     [xi = x.impl(), bi = b.impl(), batch, channels, inner](TensorImpl& self) {
                       if (xi->needs_grad) accum(*xi, {self.grad.data(), self.grad.size()});
                       if (bi->needs_grad) {
                         bi->ensure_grad();
                         std::size_t idx = 0;
                         for (int n = 0; n < batch; ++n)
                           for (int c = 0; c < channels; ++c) {
                             double s = 0.0;
                             for (std::size_t i = 0; i < inner; ++i, ++idx) s += self.grad[idx];
                             bi->grad[static_cast<std::size_t>(c)] += s;
                           }
                       }
                     });
}

Tensor pad_channels(const Tensor& x, int out_channels) {
  const auto& xs = x.shape();
  if (xs.size() != 4)
    throw std::invalid_argument("pad_channels: expected [B,C,H,W], got " + shape_str(xs));
  const int batch = xs[0], in_c = xs[1], h = xs[2], w = xs[3];
  if (out_channels < in_c)
    throw std::invalid_argument("pad_channels: target channels " + std::to_string(out_channels) +
                                " < input channels " + std::to_string(in_c));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> out(static_cast<std::size_t>(batch) * out_channels * plane, 0.0);
  const auto dx = x.data();
  for (int n = 0; n < batch; ++n)
    std::copy_n(dx.data() + static_cast<std::size_t>(n) * in_c * plane, in_c * plane,
                out.data() + static_cast<std::size_t>(n) * out_channels * plane);
  return make_result({batch, out_channels, h, w}, std::move(out), {x},
                     [xi = x.impl(), batch, in_c, out_channels, plane](TensorImpl& self) {
                       if (!xi->needs_grad) return;
                       xi->ensure_grad();
                       for (int n = 0; n < batch; ++n) {
                         const double* src =
                             self.grad.data() + static_cast<std::size_t>(n) * out_channels * plane;
                         double* dst = xi->grad.data() + static_cast<std::size_t>(n) * in_c * plane;
                         for (std::size_t i = 0; i < static_cast<std::size_t>(in_c) * plane; ++i)
                           dst[i] += src[i];
                       }
                     });
}

Tensor channel_affine(const Tensor& x, std::vector<double> ch_scale, std::vector<double> ch_shift) {
  const auto& xs = x.shape();
  if (xs.size() < 2)
    throw std::invalid_argument("channel_affine: expected at least [B,C], got " + shape_str(xs));
  const int channels = xs[1];
  if (ch_scale.size() != static_cast<std::size_t>(channels) || ch_shift.size() != ch_scale.size())
    throw std::invalid_argument("channel_affine: expected " + std::to_string(channels) +
                                " per-channel constants, got " + std::to_string(ch_scale.size()));
  const int batch = xs[0];
  const std::size_t inner = x.size() / static_cast<std::size_t>(batch * channels);
  std::vector<double> out(x.size());
  const auto dx = x.data();
  std::size_t idx = 0;
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const double a = ch_scale[static_cast<std::size_t>(c)];
      const double s = ch_shift[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < inner; ++i, ++idx) out[idx] = a * dx[idx] + s;
    }
  return make_result(xs, std::move(out), {x},
                     [xi = x.impl(), sc = std::move(ch_scale), batch, channels,
                      inner](TensorImpl& self) {
                       if (!xi->needs_grad) return;
                       xi->ensure_grad();
                       std::size_t idx = 0;
                       for (int n = 0; n < batch; ++n)
                         for (int c = 0; c < channels; ++c) {
                           const double a = sc[static_cast<std::size_t>(c)];
                           for (std::size_t i = 0; i < inner; ++i, ++idx)
                             xi->grad[idx] += a * self.grad[idx];
                         }
                     });
}

// ---------------------------------------------------------------------------
// Matmul / conv / pooling

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0, out.data(), n);
  return make_result({m, n}, std::move(out), {a, b},
                     [ai = a.impl(), bi = b.impl(), m, k, n](TensorImpl& self) {
                       if (ai->needs_grad) {
                         ai->ensure_grad();
                         // dA += dC . B^T
                         gemm(false, true, m, k, n, 1.0, self.grad.data(), n, bi->data.data(), n,
                              1.0, ai->grad.data(), k);
                       }
                       if (bi->needs_grad) {
                         bi->ensure_grad();
                         // dB += A^T . dC
                         gemm(true, false, k, n, m, 1.0, ai->data.data(), k, self.grad.data(), n,
                              1.0, bi->grad.data(), n);
                       }
                     });
}

namespace {

struct ConvDims {
  int batch, in_c, in_h, in_w;
  int out_c, kh, kw;
  int stride, pad;
  int out_h, out_w;
  std::size_t col_rows() const { return static_cast<std::size_t>(in_c) * kh * kw; }
  std::size_t col_cols() const { return static_cast<std::size_t>(out_h) * out_w; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv2d: expected x[B,C,H,W] and w[Co,Ci,kh,kw], got " +
                                shape_str(xs) + " and " + shape_str(ws));
  if (xs[1] != ws[1])
    throw std::invalid_argument("conv2d: input channels mismatch " + shape_str(xs) + " vs " +
                                shape_str(ws));
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  ConvDims d;
  d.batch = xs[0];
  d.in_c = xs[1];
  d.in_h = xs[2];
  d.in_w = xs[3];
  d.out_c = ws[0];
  d.kh = ws[2];
  d.kw = ws[3];
  d.stride = stride;
  d.pad = pad;
  if (d.kh > d.in_h + 2 * pad || d.kw > d.in_w + 2 * pad)
    throw std::invalid_argument("conv2d: kernel " + shape_str(ws) + " exceeds padded input " +
                                shape_str(xs));
  d.out_h = (d.in_h + 2 * pad - d.kh) / stride + 1;
  d.out_w = (d.in_w + 2 * pad - d.kw) / stride + 1;
  return d;
}

// col[(ci*kh+i)*kw+j][oh*out_w+ow] = x[ci][oh*s-p+i][ow*s-p+j] (one sample)
void im2col(const double* x, const ConvDims& d, double* col) {
  const int hw = d.in_h * d.in_w;
  const std::size_t cols = d.col_cols();
  for (int ci = 0; ci < d.in_c; ++ci) {
    const double* plane = x + static_cast<std::size_t>(ci) * hw;
    for (int i = 0; i < d.kh; ++i)
      for (int j = 0; j < d.kw; ++j) {
        double* row = col + ((static_cast<std::size_t>(ci) * d.kh + i) * d.kw + j) * cols;
        std::size_t o = 0;
        for (int oh = 0; oh < d.out_h; ++oh) {
          const int ih = oh * d.stride - d.pad + i;
          if (ih < 0 || ih >= d.in_h) {
            for (int ow = 0; ow < d.out_w; ++ow, ++o) row[o] = 0.0;
            continue;
          }
          const double* line = plane + static_cast<std::size_t>(ih) * d.in_w;
          for (int ow = 0; ow < d.out_w; ++ow, ++o) {
            const int iw = ow * d.stride - d.pad + j;
            row[o] = (iw >= 0 && iw < d.in_w) ? line[iw] : 0.0;
          }
        }
      }
  }
}

void col2im_accum(const double* col, const ConvDims& d, double* dx) {
  const int hw = d.in_h * d.in_w;
  const std::size_t cols = d.col_cols();
  for (int ci = 0; ci < d.in_c; ++ci) {
    double* plane = dx + static_cast<std::size_t>(ci) * hw;
    for (int i = 0; i < d.kh; ++i)
      for (int j = 0; j < d.kw; ++j) {
        const double* row = col + ((static_cast<std::size_t>(ci) * d.kh + i) * d.kw + j) * cols;
        std::size_t o = 0;
        for (int oh = 0; oh < d.out_h; ++oh) {
          const int ih = oh * d.stride - d.pad + i;
          if (ih < 0 || ih >= d.in_h) {
            o += static_cast<std::size_t>(d.out_w);
            continue;
          }
          double* line = plane + static_cast<std::size_t>(ih) * d.in_w;
          for (int ow = 0; ow < d.out_w; ++ow, ++o) {
            const int iw = ow * d.stride - d.pad + j;
            if (iw >= 0 && iw < d.in_w) line[iw] += row[o];
          }
        }
      }
  }
}

std::vector<double>& conv_scratch() {
  static thread_local std::vector<double> buf;
  return buf;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  const std::size_t kdim = d.col_rows();
  const std::size_t cols = d.col_cols();
  const std::size_t in_sample = static_cast<std::size_t>(d.in_c) * d.in_h * d.in_w;
  const std::size_t out_sample = static_cast<std::size_t>(d.out_c) * cols;

  std::vector<double> out(static_cast<std::size_t>(d.batch) * out_sample);
  auto& col = conv_scratch();
  col.resize(kdim * cols);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  for (int n = 0; n < d.batch; ++n) {
    im2col(xd + n * in_sample, d, col.data());
    gemm(false, false, d.out_c, static_cast<int>(cols), static_cast<int>(kdim), 1.0, wd,
         static_cast<int>(kdim), col.data(), static_cast<int>(cols), 0.0,
         out.data() + n * out_sample, static_cast<int>(cols));
  }
  return make_result(
      {d.batch, d.out_c, d.out_h, d.out_w}, std::move(out), {x, w},
      [xi = x.impl(), wi = w.impl(), d, kdim, cols, in_sample, out_sample](TensorImpl& self) {
        auto& colbuf = conv_scratch();
        colbuf.resize(kdim * cols);
        std::vector<double> dcol;
        if (xi->needs_grad) {
          xi->ensure_grad();
          dcol.resize(kdim * cols);
        }
        if (wi->needs_grad) wi->ensure_grad();
        for (int n = 0; n < d.batch; ++n) {
          const double* dy = self.grad.data() + n * out_sample;
          if (wi->needs_grad) {
            im2col(xi->data.data() + n * in_sample, d, colbuf.data());
            // dW += dY . col^T
            gemm(false, true, d.out_c, static_cast<int>(kdim), static_cast<int>(cols), 1.0, dy,
                 static_cast<int>(cols), colbuf.data(), static_cast<int>(cols), 1.0,
                 wi->grad.data(), static_cast<int>(kdim));
          }
          if (xi->needs_grad) {
            // dcol = W^T . dY, then scatter back
            gemm(true, false, static_cast<int>(kdim), static_cast<int>(cols), d.out_c, 1.0,
                 wi->data.data(), static_cast<int>(kdim), dy, static_cast<int>(cols), 0.0,
                 dcol.data(), static_cast<int>(cols));
            col2im_accum(dcol.data(), d, xi->grad.data() + n * in_sample);
          }
        }
      });
}

Tensor avg_pool(const Tensor& x, int window, int stride) {
  const auto& xs = x.shape();
  if (xs.size() != 4)
    throw std::invalid_argument("avg_pool: expected [B,C,H,W], got " + shape_str(xs));
  if (window < 1 || stride < 1) throw std::invalid_argument("avg_pool: bad window/stride");
  const int batch = xs[0], channels = xs[1], h = xs[2], w = xs[3];
  if (window > h || window > w)
    throw std::invalid_argument("avg_pool: window " + std::to_string(window) +
                                " exceeds input " + shape_str(xs));
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
  const double inv = 1.0 / (static_cast<double>(window) * window);
  std::vector<double> out(static_cast<std::size_t>(batch) * channels * oh * ow);
  const auto dx = x.data();
  std::size_t o = 0;
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c) {
      const double* plane = dx.data() + (static_cast<std::size_t>(n) * channels + c) * h * w;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j, ++o) {
          double s = 0.0;
          for (int a = 0; a < window; ++a)
            for (int b = 0; b < window; ++b)
              s += plane[static_cast<std::size_t>(i * stride + a) * w + (j * stride + b)];
          out[o] = s * inv;
        }
    }
  return make_result({batch, channels, oh, ow}, std::move(out), {x},
                     [xi = x.impl(), batch, channels, h, w, oh, ow, window, stride,
                      inv](TensorImpl& self) {
                       if (!xi->needs_grad) return;
                       xi->ensure_grad();
                       std::size_t o = 0;
                       for (int n = 0; n < batch; ++n)
                         for (int c = 0; c < channels; ++c) {
                           double* plane =
                               xi->grad.data() + (static_cast<std::size_t>(n) * channels + c) * h * w;
                           for (int i = 0; i < oh; ++i)
                             for (int j = 0; j < ow; ++j, ++o) {
                               const double g = self.grad[o] * inv;
                               for (int a = 0; a < window; ++a)
                                 for (int b = 0; b < window; ++b)
                                   plane[static_cast<std::size_t>(i * stride + a) * w +
                                         (j * stride + b)] += g;
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Losses / stochastic

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  const auto& ls = logits.shape();
  if (ls.size() != 2)
    throw std::invalid_argument("softmax_cross_entropy: expected [B,C], got " + shape_str(ls));
  const int batch = ls[0], classes = ls[1];
  if (targets.size() != static_cast<std::size_t>(batch))
    throw std::invalid_argument("softmax_cross_entropy: batch " + std::to_string(batch) +
                                " vs " + std::to_string(targets.size()) + " targets");
  for (int t : targets)
    if (t < 0 || t >= classes)
      throw std::invalid_argument("softmax_cross_entropy: target " + std::to_string(t) +
                                  " out of range [0, " + std::to_string(classes) + ")");
  const auto dl = logits.data();
  std::vector<double> probs(dl.size());
  double loss = 0.0;
  for (int n = 0; n < batch; ++n) {
    const double* row = dl.data() + static_cast<std::size_t>(n) * classes;
    double* prow = probs.data() + static_cast<std::size_t>(n) * classes;
    double mx = row[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int c = 0; c < classes; ++c) {
      prow[c] = std::exp(row[c] - mx);
      denom += prow[c];
    }
    for (int c = 0; c < classes; ++c) prow[c] /= denom;
    loss -= std::log(std::max(prow[targets[static_cast<std::size_t>(n)]], 1e-300));
  }
  loss /= batch;
  return make_result({1}, {loss}, {logits},
                     [li = logits.impl(), probs = std::move(probs), targets, batch,
                      classes](TensorImpl& self) {
                       if (!li->needs_grad) return;
                       li->ensure_grad();
                       const double g = self.grad[0] / batch;
                       for (int n = 0; n < batch; ++n) {
                         const double* prow = probs.data() + static_cast<std::size_t>(n) * classes;
                         double* grow = li->grad.data() + static_cast<std::size_t>(n) * classes;
                         const int t = targets[static_cast<std::size_t>(n)];
                         for (int c = 0; c < classes; ++c)
                           grow[c] += g * (prow[c] - (c == t ? 1.0 : 0.0));
                       }
                     });
}

Tensor inject_noise(const Tensor& features, const Tensor& theta, std::vector<double> z) {
  const auto& fs = features.shape();
  const auto& ts = theta.shape();
  if (fs.size() < 2 || Shape(fs.begin() + 1, fs.end()) != ts)
    throw std::invalid_argument("inject_noise: feature shape " + shape_str(fs) +
                                " does not host theta " + shape_str(ts));
  if (z.size() != features.size())
    throw std::invalid_argument("inject_noise: noise draw size " + std::to_string(z.size()) +
                                " vs features " + std::to_string(features.size()));
  const int batch = fs[0];
  const std::size_t per = theta.size();
  std::vector<double> out(features.size());
  const auto df = features.data();
  const auto dt = theta.data();
  for (int n = 0; n < batch; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * per;
    for (std::size_t i = 0; i < per; ++i) out[base + i] = df[base + i] + dt[i] * z[base + i];
  }
  return make_result(fs, std::move(out), {features, theta},
                     [fi = features.impl(), ti = theta.impl(), z = std::move(z), batch,
                      per](TensorImpl& self) {
                       if (fi->needs_grad) accum(*fi, {self.grad.data(), self.grad.size()});
                       if (ti->needs_grad) {
                         ti->ensure_grad();
                         for (int n = 0; n < batch; ++n) {
                           const std::size_t base = static_cast<std::size_t>(n) * per;
                           for (std::size_t i = 0; i < per; ++i)
                             ti->grad[i] += self.grad[base + i] * z[base + i];
                         }
                       }
                     });
}

Tensor cw_margin(const Tensor& logits, int true_class, double kappa) {
  const auto& ls = logits.shape();
  std::size_t classes = logits.size();
  if (ls.size() == 2 && ls[0] != 1)
    throw std::invalid_argument("cw_margin: expected a single-row logit tensor, got " +
                                shape_str(ls));
  if (classes < 2) throw std::invalid_argument("cw_margin: need at least 2 classes");
  if (true_class < 0 || static_cast<std::size_t>(true_class) >= classes)
    throw std::invalid_argument("cw_margin: class index out of range");
  const auto dl = logits.data();
  int runner = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < classes; ++c) {
    if (static_cast<int>(c) == true_class) continue;
    if (dl[c] > best) {
      best = dl[c];
      runner = static_cast<int>(c);
    }
  }
  const double margin = dl[static_cast<std::size_t>(true_class)] - best;
  const bool active = margin > -kappa;
  const double value = active ? margin : -kappa;
  return make_result({1}, {value}, {logits},
                     [li = logits.impl(), true_class, runner, active](TensorImpl& self) {
                       if (!li->needs_grad || !active) return;
                       li->ensure_grad();
                       li->grad[static_cast<std::size_t>(true_class)] += self.grad[0];
                       li->grad[static_cast<std::size_t>(runner)] -= self.grad[0];
                     });
}

// ---------------------------------------------------------------------------
// Inference helpers

std::vector<double> softmax_row(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double denom = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    denom += p[i];
  }
  for (auto& v : p) v /= denom;
  return p;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const auto& ls = logits.shape();
  if (ls.size() != 2) throw std::invalid_argument("argmax_rows: expected [B,C]");
  const int batch = ls[0], classes = ls[1];
  std::vector<int> out(static_cast<std::size_t>(batch));
  const auto dl = logits.data();
  for (int n = 0; n < batch; ++n) {
    const double* row = dl.data() + static_cast<std::size_t>(n) * classes;
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (row[c] > row[best]) best = c;
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

}  // namespace l2p

#pragma once

#include <span>
#include <vector>

#include "l2p/tensor.hpp"

namespace l2p {

// Elementwise and linear algebra. All ops validate shapes up front and record
// define-by-run graph nodes when an input participates in autodiff.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& x, double mul_c, double add_c);  // mul_c * x + add_c
Tensor scale(const Tensor& x, double c);
Tensor matmul(const Tensor& a, const Tensor& b);  // [MxK] . [KxN]
Tensor relu(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor sum(const Tensor& x);  // scalar
Tensor sqrt_clamped(const Tensor& x, double eps);  // sqrt(max(x, eps)), slope clamped at eps

// Structure.
Tensor flatten(const Tensor& x);  // [B, ...] -> [B, rest]
Tensor reshape(const Tensor& x, Shape new_shape);  // same element count
Tensor bias_add(const Tensor& x, const Tensor& b);  // b[C] broadcast over [B,C] or [B,C,H,W]
Tensor pad_channels(const Tensor& x, int out_channels);  // zero-pad dim 1
Tensor channel_affine(const Tensor& x, std::vector<double> ch_scale, std::vector<double> ch_shift);

// Convolution / pooling on [B,C,H,W].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor avg_pool(const Tensor& x, int window, int stride);

// Losses and stochastic ops.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets);
/// features[B, F...] + theta[F...] `elementwise-scaled` z[B, F...]; z is the
/// pre-sampled standard-normal draw, captured so backward replays the exact
/// same realization (reparameterization).
Tensor inject_noise(const Tensor& features, const Tensor& theta, std::vector<double> z);
/// max(z_true - max_{j != true} z_j, -kappa) on a single-row logit tensor.
Tensor cw_margin(const Tensor& logits, int true_class, double kappa);

// Inference helpers (never touch the graph).
std::vector<double> softmax_row(std::span<const double> logits);
std::vector<int> argmax_rows(const Tensor& logits);

/// BLAS-backed GEMM: C[m,n] = alpha * op(A) . op(B) + beta * C (row-major).
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          int lda, const double* b, int ldb, double beta, double* c, int ldc);

}  // namespace l2p

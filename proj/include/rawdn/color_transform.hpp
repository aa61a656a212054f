#pragma once

// Learnable 4x4 channel decorrelation (R, G1, G2, B) -> (Y, U, V, W) applied as a
// point-wise convolution.

#include <cmath>

#include "rawdn/autodiff.hpp"
#include "rawdn/tensor.hpp"

namespace rawdn {

/// Row-major 4x4 kernel; rows produce Y, U, V, W.
template <typename T>
using ColorKernel = Tensor<T>;

template <typename T>
ColorKernel<T> initial_color_kernel() {
  ColorKernel<T> m(std::vector<int>{4, 4});
  const double rows[4][4] = {{0.5, 0.5, 0.5, 0.5},
                             {-0.5, 0.5, 0.5, -0.5},
                             {0.65, 0.2784, -0.2784, -0.65},
                             {-0.2784, 0.65, -0.65, 0.2784}};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) m[i * 4 + j] = static_cast<T>(rows[i][j]);
  return m;
}

template <typename T>
ColorKernel<T> identity_color_kernel() {
  ColorKernel<T> m(std::vector<int>{4, 4});
  for (int i = 0; i < 4; ++i) m[i * 4 + i] = T(1);
  return m;
}

inline void require_color_kernel(const std::vector<int>& shape) {
  if (shape != std::vector<int>{4, 4}) {
    throw usage_error("shape_mismatch", "color kernel must be 4x4, got " + shape_string(shape));
  }
}

template <typename T>
Tensor<T> color_forward(const Tensor<T>& frame, const ColorKernel<T>& k) {
  require_color_kernel(k.shape());
  ad::Tape<T> t(false);
  return t.value(ad::channel_matmul(t, t.constant(k), t.constant(frame)));
}

/// Applies the true inverse of M, so reconstruction is exact even when M has drifted
/// away from orthonormal during training.
template <typename T>
Tensor<T> color_inverse(const Tensor<T>& frame, const ColorKernel<T>& k) {
  require_color_kernel(k.shape());
  ad::Tape<T> t(false);
  return t.value(ad::channel_matmul(t, ad::inverse(t, t.constant(k)), t.constant(frame)));
}

/// ||M M^T - I||_F
template <typename T>
double orthonormality_loss(const ColorKernel<T>& k) {
  ad::Tape<T> t(false);
  return static_cast<double>(t.value(ad::orthonormality(t, t.constant(k)))[0]);
}

/// Per pixel, (M o M) v: the variance of each output channel given independent
/// per-channel input noise with variances v.
template <typename T>
Tensor<T> transform_variance(const Tensor<T>& variance, const ColorKernel<T>& k) {
  require_color_kernel(k.shape());
  ad::Tape<T> t(false);
  const auto m = t.constant(k);
  return t.value(ad::channel_matmul(t, ad::square(t, m), t.constant(variance)));
}

/// Gram-Schmidt over the rows, in order. Used as the projection step during training.
template <typename T>
ColorKernel<T> orthonormalize_rows(const ColorKernel<T>& k) {
  require_color_kernel(k.shape());
  double r[4][4];
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) r[i][j] = k[i * 4 + j];
  for (int i = 0; i < 4; ++i) {
    for (int p = 0; p < i; ++p) {
      double d = 0;
      for (int j = 0; j < 4; ++j) d += r[i][j] * r[p][j];
      for (int j = 0; j < 4; ++j) r[i][j] -= d * r[p][j];
    }
    double n = 0;
    for (int j = 0; j < 4; ++j) n += r[i][j] * r[i][j];
    n = std::sqrt(n);
    if (!(n > 0.0)) throw numeric_error("singular", "color kernel rows are linearly dependent");
    for (int j = 0; j < 4; ++j) r[i][j] /= n;
  }
  ColorKernel<T> out(k.shape());
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) out[i * 4 + j] = static_cast<T>(r[i][j]);
  return out;
}

}  // namespace rawdn

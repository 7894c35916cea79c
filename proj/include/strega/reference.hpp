#pragma once

// Serial, loop-for-loop reference kernels. Slow on purpose: they exist to
// check the parallel kernels in kernels.hpp and as the benchmark baseline.

#include <cmath>
#include <cstddef>

#include "strega/tensor.hpp"

namespace strega::reference {

/// Direct quadruple loop: y[b,o,i,j] = bias[o] + sum_{c,u,v} w[o,c,u,v] * x[b,c,i*s-p+u, j*s-p+v].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias, std::size_t stride,
                 std::size_t pad) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<T> y({batch, cout, ho, wo});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          T acc = bias ? (*bias)[o] : T{0};
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const auto r = static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pad);
                const auto q = static_cast<std::ptrdiff_t>(j * stride + v) - static_cast<std::ptrdiff_t>(pad);
                if (r < 0 || q < 0 || r >= static_cast<std::ptrdiff_t>(h) || q >= static_cast<std::ptrdiff_t>(wd)) continue;
                acc += w.at(o, c, u, v) * x.at(b, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q));
              }
          y.at(b, o, i, j) = acc;
        }
  return y;
}

/// Scatter form of the transposed convolution: every input value spreads a
/// weighted copy of the kernel into the output. x [B,Cout,H,W], w [Cout,Cin,K,K].
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                           std::size_t stride, std::size_t pad) {
  const std::size_t batch = x.dim(0), cout = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t cin = w.dim(1), k = w.dim(2);
  const std::size_t ho = (h - 1) * stride + k - 2 * pad;
  const std::size_t wo = (wd - 1) * stride + k - 2 * pad;
  Tensor<T> y({batch, cin, ho, wo});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j)
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const auto r = static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pad);
                const auto q = static_cast<std::ptrdiff_t>(j * stride + v) - static_cast<std::ptrdiff_t>(pad);
                if (r < 0 || q < 0 || r >= static_cast<std::ptrdiff_t>(ho) || q >= static_cast<std::ptrdiff_t>(wo)) continue;
                y.at(b, c, static_cast<std::size_t>(r), static_cast<std::size_t>(q)) += w.at(o, c, u, v) * x.at(b, o, i, j);
              }
  if (bias) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < ho; ++i)
          for (std::size_t j = 0; j < wo; ++j) y.at(b, c, i, j) += (*bias)[c];
  }
  return y;
}

/// Training-mode batch normalization with two-pass statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const std::size_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const double n = static_cast<double>(batch * h * wd);
  Tensor<T> y(x.dims());
  for (std::size_t c = 0; c < ch; ++c) {
    double s = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j) s += x.at(b, c, i, j);
    const double m = s / n;
    double ss = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j) ss += (x.at(b, c, i, j) - m) * (x.at(b, c, i, j) - m);
    const double inv = 1.0 / std::sqrt(ss / n + eps);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j)
          y.at(b, c, i, j) = static_cast<T>(gamma[c] * (x.at(b, c, i, j) - m) * inv + beta[c]);
  }
  return y;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t batch = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<T> y({batch, out});
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      T acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x.at(r, i) * w.at(o, i);
      y.at(r, o) = acc;
    }
  return y;
}

}  // namespace strega::reference

#pragma once

// OpenMP-parallel compute kernels (im2col + GEMM). Parallelism is over the
// batch axis for convolutions and over channels for batch normalization;
// per-thread partial sums are reduced in thread order, so results are
// deterministic for a fixed thread count.
//
// Naive serial counterparts live in reference.hpp and are used by the tests
// and the benchmark.

#include <cstddef>

#include "strega/tensor.hpp"

namespace strega::kernels {

/// Output extent of a strided convolution along one axis.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);
/// Output extent of the matching transposed convolution.
std::size_t conv_transpose_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t pad);

/// Cross-correlation: x [B,Cin,H,W], w [Cout,Cin,K,K], optional bias [Cout].
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad);

/// Adjoint of conv2d_forward with respect to its input: gy [B,Cout,Ho,Wo] -> [B,Cin,H,W].
/// Also the forward map of a transposed convolution.
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& gy, const Tensor<T>& w, std::size_t in_h,
                                std::size_t in_w, std::size_t stride, std::size_t pad);

/// Accumulates d<conv(x,w), gy>/dw into gw and, when non-null, sum of gy into gb.
template <typename T>
void conv2d_backward_weights(const Tensor<T>& x, const Tensor<T>& gy, std::size_t stride,
                             std::size_t pad, Tensor<T>& gw, Tensor<T>* gb);

/// Per-channel sums over the batch and spatial axes of a [B,C,H,W] tensor.
template <typename T>
void channel_sums(const Tensor<T>& t, Tensor<T>& out);

/// y [B,out] = x [B,in] * w^T + b, w [out,in].
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Returns gx and accumulates gw, gb.
template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy,
                         Tensor<T>& gw, Tensor<T>& gb);

/// Batch statistics pass: normalizes x per channel and writes the normalized
/// values (before the affine) to xhat and 1/sqrt(var+eps) to inv_std.
template <typename T>
void batch_norm_train(const Tensor<T>& x, T eps, Tensor<T>& xhat, Tensor<T>& mean,
                      Tensor<T>& var, Tensor<T>& inv_std);

/// y = gamma * xhat + beta, per channel.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& xhat, const Tensor<T>& gamma, const Tensor<T>& beta);

/// Backward of batch_norm_train followed by channel_affine. Accumulates
/// ggamma and gbeta; returns the input gradient.
template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& gy, const Tensor<T>& xhat,
                              const Tensor<T>& inv_std, const Tensor<T>& gamma,
                              Tensor<T>& ggamma, Tensor<T>& gbeta);

template <typename T>
void leaky_relu_inplace(Tensor<T>& x, T slope);

/// gy scaled by slope where the forward output was negative.
template <typename T>
void leaky_relu_backward_inplace(Tensor<T>& gy, const Tensor<T>& y, T slope);

}  // namespace strega::kernels

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "strega/rng.hpp"
#include "strega/tensor.hpp"

namespace strega::nn {

inline constexpr double kLeakySlope = 0.2;

/// Square-kernel convolution. Weights are always [out_ch, in_ch, k, k]; a
/// transposed layer is the adjoint of the plain one with the same weights, so
/// it consumes out_ch channels and produces in_ch. Bias has one entry per
/// produced channel.
template <typename T>
struct ConvLayer {
  Tensor<T> weights;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool transposed = false;

  std::size_t kernel() const { return weights.dim(2); }
  std::size_t consumed_channels() const { return transposed ? weights.dim(0) : weights.dim(1); }
  std::size_t produced_channels() const { return transposed ? weights.dim(1) : weights.dim(0); }

  template <typename U>
  ConvLayer<U> cast() const {
    return {weights.template cast<U>(), bias.template cast<U>(), stride, pad, transposed};
  }
};

/// Uniform init in +-sqrt(1/fan_in), fan_in = consumed channels * k * k.
template <typename T>
ConvLayer<T> make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t stride,
                       std::size_t pad, bool transposed, RngStream& rng);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvLayer<T>& layer);

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvLayer<T>& layer,
                             const Tensor<T>& grad_out);

/// Accumulating form used inside the network: adds parameter gradients into
/// gw/gb and returns the input gradient (skipped when want_input is false).
template <typename T>
Tensor<T> conv2d_backward_accumulate(const Tensor<T>& input, const ConvLayer<T>& layer,
                                     const Tensor<T>& grad_out, Tensor<T>& gw, Tensor<T>& gb,
                                     bool want_input = true);

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  template <typename U>
  BatchNormState<U> cast() const {
    return {gamma.template cast<U>(), beta.template cast<U>(), running_mean.template cast<U>(),
            running_var.template cast<U>(), momentum, epsilon};
  }
};

template <typename T>
BatchNormState<T> make_batch_norm(std::size_t channels);

enum class NormMode {
  kTrain,          // batch statistics, running statistics updated
  kTrainNoUpdate,  // batch statistics, running statistics left alone
  kEval            // running statistics
};

/// Values the backward pass needs from a training-mode forward.
template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  Tensor<T> inv_std;
};

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, NormMode mode,
                     BatchNormCache<T>* cache = nullptr);

/// Convenience overload: training=true updates running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, bool training) {
  return batch_norm(input, state, training ? NormMode::kTrain : NormMode::kEval);
}

/// Input gradient of a training-mode batch norm; accumulates gamma/beta grads.
template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& grad_out, const BatchNormState<T>& state,
                              const BatchNormCache<T>& cache, Tensor<T>& ggamma, Tensor<T>& gbeta);

template <typename T>
struct DenseLayer {
  Tensor<T> weights;  // [out, in]
  Tensor<T> bias;     // [out]

  template <typename U>
  DenseLayer<U> cast() const {
    return {weights.template cast<U>(), bias.template cast<U>()};
  }
};

template <typename T>
DenseLayer<T> make_dense(std::size_t out, std::size_t in, RngStream& rng);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step_count = 0;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(std::size_t n_params, double lr);

/// One parameter tensor as the optimizer sees it.
struct ParamSlot {
  std::span<float> value;
  std::span<const float> grad;
};

/// Bias-corrected Adam over a flat parameter vector. Rejects the whole update
/// (state untouched) if any gradient is non-finite.
void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state);

/// Same update over several tensors sharing one state; moments are laid out
/// in slot order.
void adam_step(std::span<const ParamSlot> slots, AdamState& state);

}  // namespace strega::nn

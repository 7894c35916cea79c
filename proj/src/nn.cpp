#include "strega/nn.hpp"

#include <cmath>

#include "strega/kernels.hpp"

namespace strega::nn {

template <typename T>
ConvLayer<T> make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t k, std::size_t stride,
                       std::size_t pad, bool transposed, RngStream& rng) {
  ConvLayer<T> layer{Tensor<T>({out_ch, in_ch, k, k}), Tensor<T>({transposed ? in_ch : out_ch}),
                     stride, pad, transposed};
  const double fan_in = static_cast<double>((transposed ? out_ch : in_ch) * k * k);
  const double bound = std::sqrt(1.0 / fan_in);
  for (auto& w : layer.weights.values()) w = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& b : layer.bias.values()) b = static_cast<T>(rng.uniform(-bound, bound));
  return layer;
}

namespace {

template <typename T>
void check_conv_input(const Tensor<T>& input, const ConvLayer<T>& layer) {
  if (input.rank() != 4) throw ShapeError("conv input must be [B,C,H,W], got " + dims_to_string(input.dims()));
  if (layer.weights.rank() != 4 || layer.weights.dim(2) != layer.weights.dim(3)) {
    throw ShapeError("conv kernel must be square", 3);
  }
  if (input.dim(1) != layer.consumed_channels()) {
    throw ShapeError("conv input has " + std::to_string(input.dim(1)) + " channels, layer expects " +
                         std::to_string(layer.consumed_channels()),
                     1);
  }
}

template <typename T>
Tensor<T> output_gradient_check(const Tensor<T>& input, const ConvLayer<T>& layer,
                                const Tensor<T>& grad_out) {
  check_conv_input(input, layer);
  const std::size_t k = layer.kernel();
  Dims expect{input.dim(0), layer.produced_channels(), 0, 0};
  for (int a = 2; a < 4; ++a) {
    expect[a] = layer.transposed
                    ? kernels::conv_transpose_out_extent(input.dim(a), k, layer.stride, layer.pad)
                    : kernels::conv_out_extent(input.dim(a), k, layer.stride, layer.pad);
  }
  require_same_dims(grad_out.dims(), expect, "conv grad_out");
  return {};
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvLayer<T>& layer) {
  check_conv_input(input, layer);
  if (!layer.transposed) {
    return kernels::conv2d_forward(input, layer.weights, &layer.bias, layer.stride, layer.pad);
  }
  const std::size_t k = layer.kernel();
  const std::size_t oh = kernels::conv_transpose_out_extent(input.dim(2), k, layer.stride, layer.pad);
  const std::size_t ow = kernels::conv_transpose_out_extent(input.dim(3), k, layer.stride, layer.pad);
  Tensor<T> y = kernels::conv2d_backward_input(input, layer.weights, oh, ow, layer.stride, layer.pad);
  const std::size_t batch = y.dim(0), ch = y.dim(1), plane = oh * ow;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      T* p = y.data() + (b * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += layer.bias[c];
    }
  return y;
}

template <typename T>
Tensor<T> conv2d_backward_accumulate(const Tensor<T>& input, const ConvLayer<T>& layer,
                                     const Tensor<T>& grad_out, Tensor<T>& gw, Tensor<T>& gb,
                                     bool want_input) {
  output_gradient_check(input, layer, grad_out);
  Tensor<T> gx;
  if (!layer.transposed) {
    kernels::conv2d_backward_weights(input, grad_out, layer.stride, layer.pad, gw, &gb);
    if (want_input) {
      gx = kernels::conv2d_backward_input(grad_out, layer.weights, input.dim(2), input.dim(3),
                                          layer.stride, layer.pad);
    }
  } else {
    // <convT(x, W), g> = <x, conv(g, W)>: roles of input and output swap.
    kernels::conv2d_backward_weights(grad_out, input, layer.stride, layer.pad, gw, static_cast<Tensor<T>*>(nullptr));
    Tensor<T> sums({layer.produced_channels()});
    kernels::channel_sums(grad_out, sums);
    for (std::size_t c = 0; c < sums.size(); ++c) gb[c] += sums[c];
    if (want_input) gx = kernels::conv2d_forward(grad_out, layer.weights, static_cast<const Tensor<T>*>(nullptr), layer.stride, layer.pad);
  }
  return gx;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvLayer<T>& layer,
                             const Tensor<T>& grad_out) {
  ConvGrads<T> g{{}, Tensor<T>(layer.weights.dims()), Tensor<T>(layer.bias.dims())};
  g.input = conv2d_backward_accumulate(input, layer, grad_out, g.weights, g.bias, true);
  return g;
}

template <typename T>
BatchNormState<T> make_batch_norm(std::size_t channels) {
  return {Tensor<T>({channels}, T{1}), Tensor<T>({channels}, T{0}), Tensor<T>({channels}, T{0}),
          Tensor<T>({channels}, T{1})};
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, NormMode mode,
                     BatchNormCache<T>* cache) {
  if (input.rank() != 4) throw ShapeError("batch_norm input must be [B,C,H,W]");
  const std::size_t ch = input.dim(1);
  if (state.gamma.size() != ch) throw ShapeError("batch_norm channel count mismatch", 1);

  if (mode == NormMode::kEval) {
    Tensor<T> scale({ch}), shift({ch});
    for (std::size_t c = 0; c < ch; ++c) {
      const double inv = 1.0 / std::sqrt(static_cast<double>(state.running_var[c]) + state.epsilon);
      scale[c] = static_cast<T>(state.gamma[c] * inv);
      shift[c] = static_cast<T>(state.beta[c] - state.gamma[c] * state.running_mean[c] * inv);
    }
    return kernels::channel_affine(input, scale, shift);
  }

  Tensor<T> xhat, mean({ch}), var({ch}), inv_std({ch});
  kernels::batch_norm_train(input, static_cast<T>(state.epsilon), xhat, mean, var, inv_std);
  if (mode == NormMode::kTrain) {
    const double n = static_cast<double>(input.size() / ch);
    const double m = state.momentum;
    for (std::size_t c = 0; c < ch; ++c) {
      state.running_mean[c] = static_cast<T>((1 - m) * state.running_mean[c] + m * mean[c]);
      state.running_var[c] = static_cast<T>((1 - m) * state.running_var[c] + m * var[c] * n / (n - 1));
    }
  }
  Tensor<T> y = kernels::channel_affine(xhat, state.gamma, state.beta);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm_backward(const Tensor<T>& grad_out, const BatchNormState<T>& state,
                              const BatchNormCache<T>& cache, Tensor<T>& ggamma, Tensor<T>& gbeta) {
  require_same_dims(grad_out.dims(), cache.xhat.dims(), "batch_norm backward");
  return kernels::batch_norm_backward(grad_out, cache.xhat, cache.inv_std, state.gamma, ggamma, gbeta);
}

template <typename T>
DenseLayer<T> make_dense(std::size_t out, std::size_t in, RngStream& rng) {
  DenseLayer<T> layer{Tensor<T>({out, in}), Tensor<T>({out})};
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  for (auto& w : layer.weights.values()) w = static_cast<T>(rng.uniform(-bound, bound));
  for (auto& b : layer.bias.values()) b = static_cast<T>(rng.uniform(-bound, bound));
  return layer;
}

AdamState make_adam(std::size_t n_params, double lr) {
  AdamState s;
  s.m.assign(n_params, 0.0);
  s.v.assign(n_params, 0.0);
  s.lr = lr;
  return s;
}

void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state) {
  const ParamSlot slot{params, grads};
  adam_step(std::span<const ParamSlot>(&slot, 1), state);
}

void adam_step(std::span<const ParamSlot> slots, AdamState& state) {
  std::size_t total = 0;
  for (const auto& s : slots) {
    if (s.value.size() != s.grad.size()) throw ShapeError("adam: parameter and gradient lengths differ");
    for (float g : s.grad) {
      if (!std::isfinite(g)) throw NonFiniteGradientError("adam: non-finite gradient, update rejected");
    }
    total += s.value.size();
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  }
  if (state.m.size() != total || state.v.size() != total) {
    throw ShapeError("adam: state length " + std::to_string(state.m.size()) +
                     " does not match parameter count " + std::to_string(total));
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  std::size_t off = 0;
  for (const auto& s : slots) {
    const auto n = static_cast<std::ptrdiff_t>(s.value.size());
    double* m = state.m.data() + off;
    double* v = state.v.data() + off;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const double g = s.grad[static_cast<std::size_t>(i)];
      m[i] = state.beta1 * m[i] + (1 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1 - state.beta2) * g * g;
      const double step = state.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
      s.value[static_cast<std::size_t>(i)] = static_cast<float>(s.value[static_cast<std::size_t>(i)] - step);
    }
    off += s.value.size();
  }
}

#define STREGA_INSTANTIATE_NN(T)                                                                 \
  template ConvLayer<T> make_conv(std::size_t, std::size_t, std::size_t, std::size_t,            \
                                  std::size_t, bool, RngStream&);                                \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvLayer<T>&);                              \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const ConvLayer<T>&, const Tensor<T>&); \
  template Tensor<T> conv2d_backward_accumulate(const Tensor<T>&, const ConvLayer<T>&,           \
                                                const Tensor<T>&, Tensor<T>&, Tensor<T>&, bool); \
  template BatchNormState<T> make_batch_norm(std::size_t);                                       \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormState<T>&, NormMode,                  \
                                BatchNormCache<T>*);                                             \
  template Tensor<T> batch_norm_backward(const Tensor<T>&, const BatchNormState<T>&,             \
                                         const BatchNormCache<T>&, Tensor<T>&, Tensor<T>&);      \
  template DenseLayer<T> make_dense(std::size_t, std::size_t, RngStream&);

STREGA_INSTANTIATE_NN(float)
STREGA_INSTANTIATE_NN(double)

}  // namespace strega::nn

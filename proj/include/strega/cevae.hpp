#pragma once

// Compact context-encoding VAE: three residual down-sampling blocks
// (64/128/256 feature maps), dense heads to a 256-wide diagonal Gaussian
// posterior, and a mirrored transposed-convolution decoder.
//
// Every forward function is templated on the scalar type so the whole network
// can be re-evaluated in double precision for gradient verification.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "strega/nn.hpp"
#include "strega/rng.hpp"
#include "strega/tensor.hpp"

namespace strega::vae {

inline constexpr std::size_t kLatentSize = 256;
inline constexpr std::array<std::size_t, 3> kFeatureMaps{64, 128, 256};
inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

/// Down- or up-sampling convolution (k4 s2 p1) + BN + leaky, followed by a
/// 1x1 convolution + BN added back onto its own input.
template <typename T>
struct ResBlock {
  nn::ConvLayer<T> resample;
  nn::BatchNormState<T> bn1;
  nn::ConvLayer<T> mix;
  nn::BatchNormState<T> bn2;

  template <typename U>
  ResBlock<U> cast() const {
    return {resample.template cast<U>(), bn1.template cast<U>(), mix.template cast<U>(),
            bn2.template cast<U>()};
  }
};

template <typename T>
struct ModelParams {
  std::size_t input_side = 64;
  std::size_t latent = kLatentSize;
  std::array<ResBlock<T>, 3> encoder;
  nn::DenseLayer<T> fc_mu;
  nn::DenseLayer<T> fc_logvar;
  nn::DenseLayer<T> fc_decode;
  std::array<ResBlock<T>, 2> decoder;
  /// Last up-sampling layer (64 -> 1), linear output.
  nn::ConvLayer<T> output;

  std::size_t bottleneck_side() const { return input_side / 8; }
  std::size_t flat_features() const {
    return kFeatureMaps[2] * bottleneck_side() * bottleneck_side();
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.input_side = input_side;
    out.latent = latent;
    for (std::size_t i = 0; i < 3; ++i) out.encoder[i] = encoder[i].template cast<U>();
    out.fc_mu = fc_mu.template cast<U>();
    out.fc_logvar = fc_logvar.template cast<U>();
    out.fc_decode = fc_decode.template cast<U>();
    for (std::size_t i = 0; i < 2; ++i) out.decoder[i] = decoder[i].template cast<U>();
    out.output = output.template cast<U>();
    return out;
  }
};

/// Fresh model; input_side must be a power of two >= 16.
ModelParams<float> init_model(std::size_t input_side, RngStream& rng);

/// Same architecture with every tensor zeroed; used as the gradient accumulator.
template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T>* tensor;
};

/// Learnable tensors in a fixed order (names are stable checkpoint keys).
template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(ModelParams<T>& p);
/// Batch-norm running statistics.
template <typename T>
std::vector<NamedTensor<T>> buffer_tensors(ModelParams<T>& p);

std::size_t parameter_count(ModelParams<float>& p);

/// (consumed, produced) channel pairs of the three encoder and three decoder stages.
std::array<std::pair<std::size_t, std::size_t>, 3> encoder_signature(const ModelParams<float>& p);
std::array<std::pair<std::size_t, std::size_t>, 3> decoder_signature(const ModelParams<float>& p);

template <typename T>
struct BlockTrace {
  Tensor<T> input;
  Tensor<T> hidden;  // after resample + bn1 + leaky
  Tensor<T> output;  // after residual sum + leaky
  nn::BatchNormCache<T> c1;
  nn::BatchNormCache<T> c2;
};

template <typename T>
struct EncoderTrace {
  std::array<BlockTrace<T>, 3> blocks;
  Tensor<T> flat;
  Tensor<T> raw_logvar;
};

template <typename T>
struct DecoderTrace {
  Tensor<T> z;
  Tensor<T> seed;  // fc_decode output after leaky, [B,256,s,s]
  std::array<BlockTrace<T>, 2> blocks;
};

template <typename T>
struct Posterior {
  Tensor<T> mu;      // [B, latent]
  Tensor<T> logvar;  // [B, latent], clamped
};

/// Which side of every non-smooth point (leaky sign, logvar clamp region) a
/// forward pass visited. In replay mode the forward pass follows the recorded
/// branches instead, which makes it smooth in the parameters.
struct BranchTape {
  bool replay = false;
  std::vector<std::uint8_t> bits;
  std::size_t cursor = 0;
};

template <typename T>
Posterior<T> encode(const Tensor<T>& x, ModelParams<T>& params, nn::NormMode mode,
                    EncoderTrace<T>* trace = nullptr, BranchTape* tape = nullptr);

/// Eval-mode encoder on a [B,1,S,S] batch.
Posterior<float> encode(const ImageTensor& x, const ModelParams<float>& params);

template <typename T>
Tensor<T> decode(const Tensor<T>& z, ModelParams<T>& params, nn::NormMode mode,
                 DecoderTrace<T>* trace = nullptr, BranchTape* tape = nullptr);

template <typename T>
void encode_backward(const ModelParams<T>& params, const EncoderTrace<T>& trace,
                     const Tensor<T>& grad_mu, const Tensor<T>& grad_logvar, ModelParams<T>& grads);

/// Accumulates parameter gradients and returns dL/dz.
template <typename T>
Tensor<T> decode_backward(const ModelParams<T>& params, const DecoderTrace<T>& trace,
                          const Tensor<T>& grad_out, ModelParams<T>& grads);

/// z = mu + exp(logvar/2) * eps, eps standard normal from rng.
ImageTensor reparameterize(const ImageTensor& mu, const ImageTensor& logvar, RngStream& rng);

template <typename T>
Tensor<T> reparameterize_with(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& eps);

/// Mean over the batch of 0.5 * sum_d (mu^2 + exp(logvar) - 1 - logvar).
template <typename T>
double kl_loss(const Tensor<T>& mu, const Tensor<T>& logvar);

/// Pixel-mean squared error.
template <typename T>
double rec_loss(const Tensor<T>& x, const Tensor<T>& xhat);

struct MaskSpec {
  int min_rects = 1;
  int max_rects = 3;
  double side_frac_lo = 0.1;
  double side_frac_hi = 0.3;
  float fill_value = 0.0f;
};

/// Axis-aligned rectangle, half-open.
struct Rect {
  std::size_t y0, x0, y1, x1;
};

/// Draws the rectangles for one h x w image. Side lengths are the rounded
/// fraction of the image side, clamped to [ceil(lo*side), floor(hi*side)].
std::vector<Rect> draw_mask_rects(std::size_t h, std::size_t w, const MaskSpec& spec, RngStream& rng);

/// Masks every image of a [..., H, W] tensor independently.
template <typename T>
Tensor<T> context_mask(const Tensor<T>& x, const MaskSpec& spec, RngStream& rng);

struct LossWeights {
  double kl = 1.0;
  double vae = 1.0;
  double ce = 1.0;
};

struct LossBreakdown {
  double kl = 0;
  double rec_vae = 0;
  double rec_ce = 0;
  double total = 0;
};

/// Randomness consumed by one loss evaluation, drawn up front so the loss is a
/// deterministic function of the parameters (gradient checks re-use it).
template <typename T>
struct LossDraws {
  Tensor<T> eps;       // [B, latent]
  Tensor<T> masked_x;  // context-masked copy of the batch
};

template <typename T>
LossDraws<T> draw_loss_noise(const Tensor<T>& x, std::size_t latent, const MaskSpec& spec,
                             RngStream& rng);

/// Loss and, when grads is non-null, its gradient accumulated into grads.
/// `update_running` selects whether the clean pass updates BN running statistics.
/// `tape` records (or replays) the branches taken by all forward passes.
template <typename T>
LossBreakdown loss_with_draws(const Tensor<T>& x, ModelParams<T>& params, const LossDraws<T>& draws,
                              const LossWeights& weights, bool update_running,
                              ModelParams<T>* grads, BranchTape* tape = nullptr);

/// Training-divergence signal carrying the offending breakdown.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, LossBreakdown breakdown, int epoch = -1)
      : Error(what), breakdown_(breakdown), epoch_(epoch) {}
  const LossBreakdown& breakdown() const noexcept { return breakdown_; }
  int epoch() const noexcept { return epoch_; }

 private:
  LossBreakdown breakdown_;
  int epoch_;
};

struct LossAndGrads {
  LossBreakdown loss;
  ModelParams<float> grads;
};

/// Full three-term objective on one batch [B,1,S,S]. Throws DivergenceError on
/// a non-finite loss.
LossAndGrads cevae_loss(const ImageTensor& x, ModelParams<float>& params, const MaskSpec& spec,
                        const LossWeights& weights, RngStream& rng);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 1e-4;
  LossWeights weights;
  MaskSpec mask;
  /// Re-estimate batch-norm population statistics on the mean-latent path
  /// once training ends (see recalibrate_batch_norm).
  bool recalibrate_bn = true;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  LossBreakdown loss;
};

/// Optional per-batch transform applied to a copy of each mini-batch.
using BatchTransform = std::function<void(ImageTensor& batch, RngStream& rng)>;
using EpochCallback = std::function<void(const EpochMetrics&)>;

struct TrainResult {
  ModelParams<float> params;
  std::vector<EpochMetrics> metrics;
};

/// Mini-batch Adam over a dataset of [N,S,S] or [N,1,S,S] slices. Shuffling,
/// masking, sampling and the transform draw from child streams of rng.
TrainResult train(const ImageTensor& dataset, ModelParams<float> params, const TrainConfig& config,
                  RngStream& rng, const BatchTransform& transform = {},
                  const EpochCallback& on_epoch = {});

/// Replaces every running mean/variance with the equal-weight average of the
/// batch statistics seen when encoding the dataset and decoding mu. During
/// training the decoder only sees sampled latents, whose batch statistics
/// differ from those of the deterministic inference path.
void recalibrate_batch_norm(const ImageTensor& dataset, ModelParams<float>& params, std::size_t batch);

/// x - g(mu(x)) with eval-mode batch norm; x is [B,1,S,S] or [B,S,S] and the
/// residual has the same shape.
ImageTensor anomaly_residual(const ImageTensor& x, const ModelParams<float>& params);

/// g(mu(x)) in eval mode, same shape as x.
ImageTensor reconstruct(const ImageTensor& x, const ModelParams<float>& params);

}  // namespace strega::vae

#include "strega/cevae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "strega/kernels.hpp"

namespace strega::vae {

namespace {

template <typename T>
std::vector<NamedTensor<T>> block_tensors(ResBlock<T>& b, const std::string& prefix, bool buffers) {
  if (buffers) {
    return {{prefix + ".bn1.running_mean", &b.bn1.running_mean},
            {prefix + ".bn1.running_var", &b.bn1.running_var},
            {prefix + ".bn2.running_mean", &b.bn2.running_mean},
            {prefix + ".bn2.running_var", &b.bn2.running_var}};
  }
  return {{prefix + ".resample.weights", &b.resample.weights},
          {prefix + ".resample.bias", &b.resample.bias},
          {prefix + ".bn1.gamma", &b.bn1.gamma},
          {prefix + ".bn1.beta", &b.bn1.beta},
          {prefix + ".mix.weights", &b.mix.weights},
          {prefix + ".mix.bias", &b.mix.bias},
          {prefix + ".bn2.gamma", &b.bn2.gamma},
          {prefix + ".bn2.beta", &b.bn2.beta}};
}

template <typename T>
void append(std::vector<NamedTensor<T>>& out, std::vector<NamedTensor<T>> more) {
  out.insert(out.end(), more.begin(), more.end());
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

void check_tape(const BranchTape& tape, std::size_t n) {
  if (tape.cursor + n > tape.bits.size()) throw Error("branch tape is shorter than the forward pass");
}

template <typename T>
void leaky(Tensor<T>& t, BranchTape* tape) {
  const T slope = static_cast<T>(nn::kLeakySlope);
  if (tape && tape->replay) {
    check_tape(*tape, t.size());
    for (auto& v : t.values()) {
      if (!tape->bits[tape->cursor++]) v *= slope;
    }
    return;
  }
  if (tape) {
    for (T v : t.span()) tape->bits.push_back(v > T{0});
  }
  kernels::leaky_relu_inplace(t, slope);
}

template <typename T>
void clamp_logvar(Tensor<T>& t, BranchTape* tape) {
  const T lo = static_cast<T>(kLogvarMin), hi = static_cast<T>(kLogvarMax);
  if (tape && tape->replay) {
    check_tape(*tape, t.size());
    for (auto& v : t.values()) {
      const std::uint8_t region = tape->bits[tape->cursor++];
      if (region != 1) v = region == 0 ? lo : hi;
    }
    return;
  }
  for (auto& v : t.values()) {
    if (tape) tape->bits.push_back(v < lo ? 0 : v > hi ? 2 : 1);
    v = std::clamp(v, lo, hi);
  }
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, ResBlock<T>& blk, nn::NormMode mode, BlockTrace<T>* trace,
                        BranchTape* tape) {
  nn::BatchNormCache<T> c1, c2;
  const bool keep = trace != nullptr && mode != nn::NormMode::kEval;
  Tensor<T> h = nn::batch_norm(nn::conv2d(x, blk.resample), blk.bn1, mode, keep ? &c1 : nullptr);
  leaky(h, tape);
  Tensor<T> m = nn::batch_norm(nn::conv2d(h, blk.mix), blk.bn2, mode, keep ? &c2 : nullptr);
  Tensor<T> out = add(h, m);
  leaky(out, tape);
  if (trace) {
    trace->input = x;
    trace->hidden = std::move(h);
    trace->output = out;
    trace->c1 = std::move(c1);
    trace->c2 = std::move(c2);
  }
  return out;
}

template <typename T>
Tensor<T> block_backward(const ResBlock<T>& blk, const BlockTrace<T>& tr, Tensor<T> g, ResBlock<T>& gb,
                         bool want_input) {
  const T slope = static_cast<T>(nn::kLeakySlope);
  if (tr.c1.xhat.empty()) throw Error("backward pass needs a training-mode trace");
  kernels::leaky_relu_backward_inplace(g, tr.output, slope);
  Tensor<T> gm = nn::batch_norm_backward(g, blk.bn2, tr.c2, gb.bn2.gamma, gb.bn2.beta);
  Tensor<T> gh = nn::conv2d_backward_accumulate(tr.hidden, blk.mix, gm, gb.mix.weights, gb.mix.bias);
  for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += g[i];
  kernels::leaky_relu_backward_inplace(gh, tr.hidden, slope);
  Tensor<T> ga = nn::batch_norm_backward(gh, blk.bn1, tr.c1, gb.bn1.gamma, gb.bn1.beta);
  return nn::conv2d_backward_accumulate(tr.input, blk.resample, ga, gb.resample.weights,
                                        gb.resample.bias, want_input);
}

template <typename T>
void for_all_tensors(ModelParams<T>& p, const std::function<void(Tensor<T>&)>& f) {
  for (auto& nt : trainable_tensors(p)) f(*nt.tensor);
  for (auto& nt : buffer_tensors(p)) f(*nt.tensor);
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x, std::size_t side) {
  if (x.rank() == 3) return x.reshaped({x.dim(0), 1, x.dim(1), x.dim(2)});
  if (x.rank() != 4) throw ShapeError("expected [B,1,S,S] or [B,S,S], got " + dims_to_string(x.dims()));
  if (x.dim(1) != 1) throw ShapeError("expected a single input channel", 1);
  if (x.dim(2) != side) throw ShapeError("input height " + std::to_string(x.dim(2)) + " != model side " + std::to_string(side), 2);
  if (x.dim(3) != side) throw ShapeError("input width " + std::to_string(x.dim(3)) + " != model side " + std::to_string(side), 3);
  return x;
}

}  // namespace

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(ModelParams<T>& p) {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < 3; ++i) append(out, block_tensors(p.encoder[i], "encoder." + std::to_string(i), false));
  out.push_back({"fc_mu.weights", &p.fc_mu.weights});
  out.push_back({"fc_mu.bias", &p.fc_mu.bias});
  out.push_back({"fc_logvar.weights", &p.fc_logvar.weights});
  out.push_back({"fc_logvar.bias", &p.fc_logvar.bias});
  out.push_back({"fc_decode.weights", &p.fc_decode.weights});
  out.push_back({"fc_decode.bias", &p.fc_decode.bias});
  for (std::size_t i = 0; i < 2; ++i) append(out, block_tensors(p.decoder[i], "decoder." + std::to_string(i), false));
  out.push_back({"output.weights", &p.output.weights});
  out.push_back({"output.bias", &p.output.bias});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> buffer_tensors(ModelParams<T>& p) {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < 3; ++i) append(out, block_tensors(p.encoder[i], "encoder." + std::to_string(i), true));
  for (std::size_t i = 0; i < 2; ++i) append(out, block_tensors(p.decoder[i], "decoder." + std::to_string(i), true));
  return out;
}

std::size_t parameter_count(ModelParams<float>& p) {
  std::size_t n = 0;
  for (auto& nt : trainable_tensors(p)) n += nt.tensor->size();
  return n;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> z = p;
  for_all_tensors<T>(z, [](Tensor<T>& t) { t.fill(T{0}); });
  return z;
}

ModelParams<float> init_model(std::size_t input_side, RngStream& rng) {
  if (input_side < 16 || !std::has_single_bit(input_side)) {
    throw ValidationError("input side must be a power of two >= 16, got " + std::to_string(input_side));
  }
  ModelParams<float> p;
  p.input_side = input_side;
  p.latent = kLatentSize;
  std::size_t in_ch = 1;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t ch = kFeatureMaps[i];
    p.encoder[i] = {nn::make_conv<float>(ch, in_ch, 4, 2, 1, false, rng), nn::make_batch_norm<float>(ch),
                    nn::make_conv<float>(ch, ch, 1, 1, 0, false, rng), nn::make_batch_norm<float>(ch)};
    in_ch = ch;
  }
  const std::size_t flat = p.flat_features();
  p.fc_mu = nn::make_dense<float>(p.latent, flat, rng);
  p.fc_logvar = nn::make_dense<float>(p.latent, flat, rng);
  p.fc_decode = nn::make_dense<float>(flat, p.latent, rng);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t from = kFeatureMaps[2 - i], to = kFeatureMaps[1 - i];
    p.decoder[i] = {nn::make_conv<float>(from, to, 4, 2, 1, true, rng), nn::make_batch_norm<float>(to),
                    nn::make_conv<float>(to, to, 1, 1, 0, false, rng), nn::make_batch_norm<float>(to)};
  }
  p.output = nn::make_conv<float>(kFeatureMaps[0], 1, 4, 2, 1, true, rng);
  return p;
}

std::array<std::pair<std::size_t, std::size_t>, 3> encoder_signature(const ModelParams<float>& p) {
  std::array<std::pair<std::size_t, std::size_t>, 3> s;
  for (std::size_t i = 0; i < 3; ++i) {
    s[i] = {p.encoder[i].resample.consumed_channels(), p.encoder[i].resample.produced_channels()};
  }
  return s;
}

std::array<std::pair<std::size_t, std::size_t>, 3> decoder_signature(const ModelParams<float>& p) {
  return {{{p.decoder[0].resample.consumed_channels(), p.decoder[0].resample.produced_channels()},
           {p.decoder[1].resample.consumed_channels(), p.decoder[1].resample.produced_channels()},
           {p.output.consumed_channels(), p.output.produced_channels()}}};
}

template <typename T>
Posterior<T> encode(const Tensor<T>& x_in, ModelParams<T>& params, nn::NormMode mode, EncoderTrace<T>* trace,
                    BranchTape* tape) {
  Tensor<T> h = as_batch(x_in, params.input_side);
  const std::size_t batch = h.dim(0);
  for (std::size_t i = 0; i < 3; ++i) {
    h = block_forward(h, params.encoder[i], mode, trace ? &trace->blocks[i] : nullptr, tape);
  }
  Tensor<T> flat = std::move(h).reshaped({batch, params.flat_features()});
  Posterior<T> post;
  post.mu = kernels::dense_forward(flat, params.fc_mu.weights, params.fc_mu.bias);
  Tensor<T> raw = kernels::dense_forward(flat, params.fc_logvar.weights, params.fc_logvar.bias);
  post.logvar = raw;
  clamp_logvar(post.logvar, tape);
  if (trace) {
    trace->flat = std::move(flat);
    trace->raw_logvar = std::move(raw);
  }
  return post;
}

Posterior<float> encode(const ImageTensor& x, const ModelParams<float>& params) {
  // Eval mode only reads the batch-norm state.
  return encode(x, const_cast<ModelParams<float>&>(params), nn::NormMode::kEval);
}

template <typename T>
Tensor<T> decode(const Tensor<T>& z, ModelParams<T>& params, nn::NormMode mode, DecoderTrace<T>* trace,
                 BranchTape* tape) {
  if (z.rank() != 2 || z.dim(1) != params.latent) {
    throw ShapeError("latent batch must be [B," + std::to_string(params.latent) + "], got " + dims_to_string(z.dims()), 1);
  }
  const std::size_t batch = z.dim(0), s = params.bottleneck_side();
  Tensor<T> h = kernels::dense_forward(z, params.fc_decode.weights, params.fc_decode.bias);
  h.reshape({batch, kFeatureMaps[2], s, s});
  leaky(h, tape);
  if (trace) {
    trace->z = z;
    trace->seed = h;
  }
  for (std::size_t i = 0; i < 2; ++i) {
    h = block_forward(h, params.decoder[i], mode, trace ? &trace->blocks[i] : nullptr, tape);
  }
  return nn::conv2d(h, params.output);
}

template <typename T>
void encode_backward(const ModelParams<T>& params, const EncoderTrace<T>& trace, const Tensor<T>& grad_mu,
                     const Tensor<T>& grad_logvar, ModelParams<T>& grads) {
  Tensor<T> g_raw = grad_logvar;
  for (std::size_t i = 0; i < g_raw.size(); ++i) {
    const T r = trace.raw_logvar[i];
    if (r < static_cast<T>(kLogvarMin) || r > static_cast<T>(kLogvarMax)) g_raw[i] = T{0};
  }
  Tensor<T> g_flat = kernels::dense_backward(trace.flat, params.fc_mu.weights, grad_mu,
                                             grads.fc_mu.weights, grads.fc_mu.bias);
  Tensor<T> g_flat2 = kernels::dense_backward(trace.flat, params.fc_logvar.weights, g_raw,
                                              grads.fc_logvar.weights, grads.fc_logvar.bias);
  for (std::size_t i = 0; i < g_flat.size(); ++i) g_flat[i] += g_flat2[i];
  Tensor<T> g = std::move(g_flat).reshaped(trace.blocks[2].output.dims());
  for (std::size_t i = 3; i-- > 0;) {
    g = block_backward(params.encoder[i], trace.blocks[i], std::move(g), grads.encoder[i], i != 0);
  }
}

template <typename T>
Tensor<T> decode_backward(const ModelParams<T>& params, const DecoderTrace<T>& trace, const Tensor<T>& grad_out,
                          ModelParams<T>& grads) {
  Tensor<T> g = nn::conv2d_backward_accumulate(trace.blocks[1].output, params.output, grad_out,
                                               grads.output.weights, grads.output.bias);
  for (std::size_t i = 2; i-- > 0;) {
    g = block_backward(params.decoder[i], trace.blocks[i], std::move(g), grads.decoder[i], true);
  }
  kernels::leaky_relu_backward_inplace(g, trace.seed, static_cast<T>(nn::kLeakySlope));
  g.reshape({trace.z.dim(0), params.flat_features()});
  return kernels::dense_backward(trace.z, params.fc_decode.weights, g, grads.fc_decode.weights,
                                 grads.fc_decode.bias);
}

template <typename T>
Tensor<T> reparameterize_with(const Tensor<T>& mu, const Tensor<T>& logvar, const Tensor<T>& eps) {
  require_same_dims(mu.dims(), logvar.dims(), "reparameterize");
  require_same_dims(mu.dims(), eps.dims(), "reparameterize");
  Tensor<T> z(mu.dims());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(T{0.5} * logvar[i]) * eps[i];
  return z;
}

ImageTensor reparameterize(const ImageTensor& mu, const ImageTensor& logvar, RngStream& rng) {
  ImageTensor eps(mu.dims());
  for (auto& e : eps.values()) e = static_cast<float>(rng.normal());
  return reparameterize_with(mu, logvar, eps);
}

template <typename T>
double kl_loss(const Tensor<T>& mu, const Tensor<T>& logvar) {
  require_same_dims(mu.dims(), logvar.dims(), "kl_loss");
  double s = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu[i], lv = logvar[i];
    s += m * m + std::exp(lv) - 1.0 - lv;
  }
  return 0.5 * s / static_cast<double>(mu.dim(0));
}

template <typename T>
double rec_loss(const Tensor<T>& x, const Tensor<T>& xhat) {
  require_same_dims(x.dims(), xhat.dims(), "rec_loss");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(xhat[i]) - static_cast<double>(x[i]);
    s += d * d;
  }
  return s / static_cast<double>(x.size());
}

std::vector<Rect> draw_mask_rects(std::size_t h, std::size_t w, const MaskSpec& spec, RngStream& rng) {
  const int n = static_cast<int>(rng.uniform_int(spec.min_rects, spec.max_rects));
  auto side_for = [&](std::size_t extent) {
    const double e = static_cast<double>(extent);
    const auto lo = static_cast<std::size_t>(std::max(1.0, std::ceil(spec.side_frac_lo * e - 1e-9)));
    const auto hi = std::max(lo, static_cast<std::size_t>(std::floor(spec.side_frac_hi * e + 1e-9)));
    const double frac = rng.uniform(spec.side_frac_lo, spec.side_frac_hi);
    auto side = static_cast<std::size_t>(std::llround(frac * e));
    return std::min(std::clamp(side, lo, hi), extent);
  };
  std::vector<Rect> rects;
  for (int r = 0; r < n; ++r) {
    const std::size_t rh = side_for(h), rw = side_for(w);
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - rh)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - rw)));
    rects.push_back({y0, x0, y0 + rh, x0 + rw});
  }
  return rects;
}

template <typename T>
Tensor<T> context_mask(const Tensor<T>& x, const MaskSpec& spec, RngStream& rng) {
  if (x.rank() < 2) throw ShapeError("context_mask needs at least a 2-D image");
  const std::size_t h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  const std::size_t images = x.size() / (h * w);
  Tensor<T> out = x;
  for (std::size_t img = 0; img < images; ++img) {
    T* p = out.data() + img * h * w;
    for (const Rect& r : draw_mask_rects(h, w, spec, rng)) {
      for (std::size_t i = r.y0; i < r.y1; ++i)
        for (std::size_t j = r.x0; j < r.x1; ++j) p[i * w + j] = static_cast<T>(spec.fill_value);
    }
  }
  return out;
}

template <typename T>
LossDraws<T> draw_loss_noise(const Tensor<T>& x, std::size_t latent, const MaskSpec& spec, RngStream& rng) {
  LossDraws<T> d;
  d.masked_x = context_mask(x, spec, rng);
  d.eps = Tensor<T>({x.dim(0), latent});
  for (auto& e : d.eps.values()) e = static_cast<T>(rng.normal());
  return d;
}

template <typename T>
LossBreakdown loss_with_draws(const Tensor<T>& x_in, ModelParams<T>& params, const LossDraws<T>& draws,
                              const LossWeights& weights, bool update_running, ModelParams<T>* grads,
                              BranchTape* tape) {
  const Tensor<T> x = as_batch(x_in, params.input_side);
  const Tensor<T> xm = as_batch(draws.masked_x, params.input_side);
  const std::size_t batch = x.dim(0);
  const double n_pix = static_cast<double>(x.size());
  const nn::NormMode clean_mode = update_running ? nn::NormMode::kTrain : nn::NormMode::kTrainNoUpdate;

  EncoderTrace<T> etr;
  DecoderTrace<T> dtr;
  if (tape) {
    if (!tape->replay) tape->bits.clear();
    tape->cursor = 0;
  }
  Posterior<T> post = encode(x, params, clean_mode, grads ? &etr : nullptr, tape);
  const Tensor<T> z = reparameterize_with(post.mu, post.logvar, draws.eps);
  const Tensor<T> xhat = decode(z, params, clean_mode, grads ? &dtr : nullptr, tape);

  EncoderTrace<T> etr_ce;
  DecoderTrace<T> dtr_ce;
  const bool ce_grads = grads && weights.ce != 0.0;
  Posterior<T> post_ce = encode(xm, params, nn::NormMode::kTrainNoUpdate, ce_grads ? &etr_ce : nullptr, tape);
  const Tensor<T> xce = decode(post_ce.mu, params, nn::NormMode::kTrainNoUpdate, ce_grads ? &dtr_ce : nullptr, tape);

  LossBreakdown lb;
  lb.kl = kl_loss(post.mu, post.logvar);
  lb.rec_vae = rec_loss(x, xhat);
  lb.rec_ce = rec_loss(x, xce);
  lb.total = weights.kl * lb.kl + weights.vae * lb.rec_vae + weights.ce * lb.rec_ce;

  if (grads) {
    Tensor<T> g_xhat(xhat.dims());
    const T sv = static_cast<T>(2.0 * weights.vae / n_pix);
    for (std::size_t i = 0; i < g_xhat.size(); ++i) g_xhat[i] = sv * (xhat[i] - x[i]);
    Tensor<T> g_z = decode_backward(params, dtr, g_xhat, *grads);

    Tensor<T> g_mu(post.mu.dims()), g_lv(post.logvar.dims());
    const T kb = static_cast<T>(weights.kl / static_cast<double>(batch));
    for (std::size_t i = 0; i < g_mu.size(); ++i) {
      const T sigma = std::exp(T{0.5} * post.logvar[i]);
      g_mu[i] = g_z[i] + kb * post.mu[i];
      g_lv[i] = g_z[i] * draws.eps[i] * T{0.5} * sigma + kb * T{0.5} * (sigma * sigma - T{1});
    }
    encode_backward(params, etr, g_mu, g_lv, *grads);

    if (ce_grads) {
      Tensor<T> g_xce(xce.dims());
      const T sc = static_cast<T>(2.0 * weights.ce / n_pix);
      for (std::size_t i = 0; i < g_xce.size(); ++i) g_xce[i] = sc * (xce[i] - x[i]);
      Tensor<T> g_mu_ce = decode_backward(params, dtr_ce, g_xce, *grads);
      encode_backward(params, etr_ce, g_mu_ce, Tensor<T>(post_ce.logvar.dims()), *grads);
    }
  }
  return lb;
}

namespace {

bool finite(const LossBreakdown& lb) {
  return std::isfinite(lb.kl) && std::isfinite(lb.rec_vae) && std::isfinite(lb.rec_ce) && std::isfinite(lb.total);
}

}  // namespace

LossAndGrads cevae_loss(const ImageTensor& x, ModelParams<float>& params, const MaskSpec& spec,
                        const LossWeights& weights, RngStream& rng) {
  const ImageTensor batch = as_batch(x, params.input_side);
  const LossDraws<float> draws = draw_loss_noise(batch, params.latent, spec, rng);
  LossAndGrads out{{}, zeros_like(params)};
  out.loss = loss_with_draws(batch, params, draws, weights, true, &out.grads);
  if (!finite(out.loss)) throw DivergenceError("non-finite loss", out.loss);
  return out;
}

TrainResult train(const ImageTensor& dataset, ModelParams<float> params, const TrainConfig& config,
                  RngStream& rng, const BatchTransform& transform, const EpochCallback& on_epoch) {
  const ImageTensor data = as_batch(dataset, params.input_side);
  const std::size_t n = data.dim(0), side = params.input_side, plane = side * side;
  if (config.batch == 0) throw ValidationError("batch size must be positive");

  RngStream shuffle_rng = rng.child("shuffle");
  RngStream noise_rng = rng.child("mask");
  RngStream augment_rng = rng.child("augment");

  ModelParams<float> grads = zeros_like(params);
  auto values = trainable_tensors(params);
  auto gvalues = trainable_tensors(grads);
  std::vector<nn::ParamSlot> slots;
  for (std::size_t i = 0; i < values.size(); ++i) slots.push_back({values[i].tensor->span(), gvalues[i].tensor->span()});
  nn::AdamState adam = nn::make_adam(parameter_count(params), config.lr);

  TrainResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    LossBreakdown sum;
    for (std::size_t start = 0; start < n; start += config.batch) {
      const std::size_t b = std::min(config.batch, n - start);
      ImageTensor batch({b, 1, side, side});
      for (std::size_t i = 0; i < b; ++i) {
        std::copy_n(data.data() + order[start + i] * plane, plane, batch.data() + i * plane);
      }
      if (transform) transform(batch, augment_rng);
      const LossDraws<float> draws = draw_loss_noise(batch, params.latent, config.mask, noise_rng);
      for (auto& nt : gvalues) nt.tensor->fill(0.0f);
      const LossBreakdown lb = loss_with_draws(batch, params, draws, config.weights, true, &grads);
      if (!finite(lb)) throw DivergenceError("training diverged at epoch " + std::to_string(epoch), lb, static_cast<int>(epoch));
      try {
        nn::adam_step(std::span<const nn::ParamSlot>(slots), adam);
      } catch (const NonFiniteGradientError&) {
        throw DivergenceError("non-finite gradient at epoch " + std::to_string(epoch), lb, static_cast<int>(epoch));
      }
      const double wgt = static_cast<double>(b);
      sum.kl += wgt * lb.kl;
      sum.rec_vae += wgt * lb.rec_vae;
      sum.rec_ce += wgt * lb.rec_ce;
      sum.total += wgt * lb.total;
    }
    const double nd = static_cast<double>(n);
    EpochMetrics m{epoch, {sum.kl / nd, sum.rec_vae / nd, sum.rec_ce / nd, sum.total / nd}};
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  if (config.recalibrate_bn && config.epochs > 0) recalibrate_batch_norm(data, params, config.batch);
  result.params = std::move(params);
  return result;
}

void recalibrate_batch_norm(const ImageTensor& dataset, ModelParams<float>& params, std::size_t batch) {
  const ImageTensor data = as_batch(dataset, params.input_side);
  const std::size_t n = data.dim(0), side = params.input_side, plane = side * side;
  if (batch == 0) throw ValidationError("batch size must be positive");
  std::vector<nn::BatchNormState<float>*> states;
  for (auto& b : params.encoder) states.insert(states.end(), {&b.bn1, &b.bn2});
  for (auto& b : params.decoder) states.insert(states.end(), {&b.bn1, &b.bn2});
  std::vector<double> saved;
  for (auto* s : states) saved.push_back(s->momentum);

  std::size_t seen = 0;
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t b = std::min(batch, n - start);
    if (b < 2) break;  // a single sample has no variance
    ImageTensor x({b, 1, side, side});
    std::copy_n(data.data() + start * plane, b * plane, x.data());
    // Cumulative average weighted by batch size.
    for (auto* s : states) s->momentum = static_cast<double>(b) / static_cast<double>(seen + b);
    const Posterior<float> post = encode(x, params, nn::NormMode::kTrain);
    (void)decode(post.mu, params, nn::NormMode::kTrain);
    seen += b;
  }
  for (std::size_t i = 0; i < states.size(); ++i) states[i]->momentum = saved[i];
}

ImageTensor reconstruct(const ImageTensor& x, const ModelParams<float>& params) {
  const ImageTensor batch = as_batch(x, params.input_side);
  auto& p = const_cast<ModelParams<float>&>(params);  // eval mode is read-only
  const std::size_t n = batch.dim(0), plane = params.input_side * params.input_side;
  constexpr std::size_t kChunk = 32;
  ImageTensor out(batch.dims());
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t b = std::min(kChunk, n - start);
    ImageTensor chunk({b, 1, params.input_side, params.input_side});
    std::copy_n(batch.data() + start * plane, b * plane, chunk.data());
    const Posterior<float> post = encode(chunk, p, nn::NormMode::kEval);
    const ImageTensor rec = decode(post.mu, p, nn::NormMode::kEval);
    std::copy_n(rec.data(), b * plane, out.data() + start * plane);
  }
  return out.reshaped(x.dims());
}

ImageTensor anomaly_residual(const ImageTensor& x, const ModelParams<float>& params) {
  ImageTensor rec = reconstruct(x, params);
  for (std::size_t i = 0; i < rec.size(); ++i) rec[i] = x[i] - rec[i];
  return rec;
}

#define STREGA_INSTANTIATE_VAE(T)                                                                   \
  template ModelParams<T> zeros_like(const ModelParams<T>&);                                         \
  template std::vector<NamedTensor<T>> trainable_tensors(ModelParams<T>&);                           \
  template std::vector<NamedTensor<T>> buffer_tensors(ModelParams<T>&);                              \
  template Posterior<T> encode(const Tensor<T>&, ModelParams<T>&, nn::NormMode, EncoderTrace<T>*, BranchTape*);    \
  template Tensor<T> decode(const Tensor<T>&, ModelParams<T>&, nn::NormMode, DecoderTrace<T>*, BranchTape*);      \
  template void encode_backward(const ModelParams<T>&, const EncoderTrace<T>&, const Tensor<T>&,     \
                                const Tensor<T>&, ModelParams<T>&);                                  \
  template Tensor<T> decode_backward(const ModelParams<T>&, const DecoderTrace<T>&,                  \
                                     const Tensor<T>&, ModelParams<T>&);                             \
  template Tensor<T> reparameterize_with(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template double kl_loss(const Tensor<T>&, const Tensor<T>&);                                       \
  template double rec_loss(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> context_mask(const Tensor<T>&, const MaskSpec&, RngStream&);                    \
  template LossDraws<T> draw_loss_noise(const Tensor<T>&, std::size_t, const MaskSpec&, RngStream&); \
  template LossBreakdown loss_with_draws(const Tensor<T>&, ModelParams<T>&, const LossDraws<T>&,     \
                                         const LossWeights&, bool, ModelParams<T>*,                   \
                                         BranchTape*);

STREGA_INSTANTIATE_VAE(float)
STREGA_INSTANTIATE_VAE(double)

}  // namespace strega::vae

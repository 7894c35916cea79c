#include "strega/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace strega::vae {

GradCheckReport finite_diff_check(const ModelParams<float>& model, const ImageTensor& batch,
                                  RngStream& rng, const GradCheckOptions& options) {
  ModelParams<double> params = model.cast<double>();
  const Tensor<double> x = batch.cast<double>();
  const LossDraws<double> draws = draw_loss_noise(x, params.latent, options.mask, rng);

  ModelParams<double> grads = zeros_like(params);
  loss_with_draws(x, params, draws, options.weights, false, &grads);

  auto values = trainable_tensors(params);
  auto gvalues = trainable_tensors(grads);
  // Forward passes replay the branches taken at the unperturbed point, so
  // every difference quotient is taken on one smooth piece of the loss.
  BranchTape tape;
  loss_with_draws(x, params, draws, options.weights, false, static_cast<ModelParams<double>*>(nullptr), &tape);
  tape.replay = true;
  auto loss_at = [&]() {
    return loss_with_draws(x, params, draws, options.weights, false, static_cast<ModelParams<double>*>(nullptr),
                           options.freeze_branches ? &tape : nullptr)
        .total;
  };

  GradCheckReport report;
  for (std::size_t s = 0; s < options.n_samples; ++s) {
    const std::size_t t = s % values.size();
    Tensor<double>& value = *values[t].tensor;
    const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(value.size() - 1)));
    const double orig = value[idx];
    value[idx] = orig + options.h;
    const double up = loss_at();
    value[idx] = orig - options.h;
    const double down = loss_at();
    value[idx] = orig;
    double analytic = (*gvalues[t].tensor)[idx];
    if (options.corrupt_sample && *options.corrupt_sample == s) analytic = 2.0 * analytic + 1.0;
    const double numeric = (up - down) / (2.0 * options.h);

    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel > report.max_relative_error || report.n_checked == 0) {
      report.max_relative_error = rel;
      report.worst_tensor = values[t].name;
      report.worst_index = idx;
    }
    ++report.n_checked;
  }
  return report;
}

}  // namespace strega::vae

#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "strega/cevae.hpp"

namespace strega::vae {

struct GradCheckOptions {
  std::size_t n_samples = 200;
  double h = 1e-3;
  /// Denominator floor: entries whose analytic and numeric magnitudes are both
  /// below it are compared in absolute terms.
  double abs_floor = 1e-6;
  LossWeights weights;
  MaskSpec mask;
  /// Evaluate perturbed losses on the branches (leaky sign, clamp region)
  /// taken at the unperturbed point. Without this, differences taken across
  /// a kink are not derivatives of anything.
  bool freeze_branches = true;
  /// Test hook: replace the analytic gradient g of the k-th sampled entry by
  /// 2g + 1, which is wrong even where the true gradient vanishes.
  std::optional<std::size_t> corrupt_sample;
};

struct GradCheckReport {
  double max_relative_error = 0;
  std::size_t n_checked = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

/// Compares the analytic gradient of the total loss with central differences
/// on a stratified random sample of parameters (every tensor is visited in
/// turn), all in double precision. Noise and masks are drawn once from rng
/// and shared by every evaluation. Batch-norm running statistics are not
/// touched.
GradCheckReport finite_diff_check(const ModelParams<float>& model, const ImageTensor& batch,
                                  RngStream& rng, const GradCheckOptions& options = {});

}  // namespace strega::vae

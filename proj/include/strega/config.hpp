#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "strega/cevae.hpp"
#include "strega/postprocess.hpp"
#include "strega/preprocess.hpp"
#include "strega/synth.hpp"

namespace strega {

/// Every tunable of a pipeline run. Text form: one `key = value` per line,
/// `#` starts a comment.
struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t side = 64;          // model input side
  std::size_t phantom_side = 64;  // phantom volume extent on every axis
  std::size_t n_train_phantoms = 10;
  std::size_t slices_per_phantom = 20;

  // Unset means (1/side^2, 1, 1): the unweighted sum of a per-sample KL and
  // per-image summed squared errors, rescaled to the pixel-mean losses.
  std::optional<vae::LossWeights> weights;
  double lr = 1e-4;
  std::size_t batch = 16;
  std::size_t epochs = 30;
  bool recalibrate_bn = true;

  bool aug_bias_field = false;
  bool aug_noise = false;
  bool aug_gamma = false;
  bool aug_ghosting = false;
  bool aug_flips = true;
  bool aug_affine = false;
  bool aug_rotation = true;

  int icm_iters = 5;
  double icm_beta = 1.0;

  std::size_t se_size = 3;
  std::optional<std::size_t> area_threshold;  // default scales with side
  bool restrict_to_brain = true;

  std::size_t n_cases = 20;
  std::size_t n_healthy = 5;
  std::vector<synth::InjectKind> kinds{synth::InjectKind::kRandom, synth::InjectKind::kDeform,
                                       synth::InjectKind::kCopyAltered, synth::InjectKind::kSuperimpose};
  synth::Shape shape = synth::Shape::kSphere;
  double superimpose_scale = 0.6;
  double gt_min_change = 0.05;

  /// Throws ValidationError on unknown keys or malformed values.
  static RunConfig parse(const std::string& text);
  /// Applies one `key = value` assignment.
  void set(const std::string& key, const std::string& value);
  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
  /// Cross-field checks (power-of-two side, odd structuring element, ...).
  void validate() const;

  std::size_t effective_area_threshold() const;
  vae::LossWeights effective_weights() const;
  vae::TrainConfig train_config() const;
  prep::AugmentSpec augment_spec() const;
  post::PostprocConfig postproc_config() const;
  synth::PhantomConfig phantom_config() const;
  synth::SuiteConfig suite_config() const;
  prep::SegmentOptions segment_options() const;
};

/// "kl,vae,ce" weights, e.g. "1,1,0".
vae::LossWeights parse_weights(const std::string& text);
std::vector<synth::InjectKind> parse_kinds(const std::string& text);

}  // namespace strega

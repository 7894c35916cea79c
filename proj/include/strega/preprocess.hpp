#pragma once

#include <cstddef>
#include <utility>

#include "strega/rng.hpp"
#include "strega/tensor.hpp"

namespace strega::prep {

struct SegmentOptions {
  int k = 4;
  int icm_iters = 5;
  double beta = 1.0;
};

/// Tissue classes of a [H,W] slice or [D,H,W] volume: 1D k-means over the
/// intensities (centroids seeded at the (2i+1)/(2k) quantiles), then ICM sweeps
/// under per-class Gaussian likelihoods plus a Potts prior over the in-plane
/// 4-neighbourhood. Labels are 0..k-1 by ascending centroid. Throws
/// DegenerateInputError when fewer than k distinct values exist.
SegMask segment_tissues(const ImageTensor& volume, RngStream& rng, const SegmentOptions& options = {});

/// Plain 1D k-means used as the first stage of segment_tissues; also returns
/// the sorted centroids.
std::pair<SegMask, std::vector<double>> kmeans_intensity(const ImageTensor& volume, int k);

struct ZScoreStats {
  double mean = 0;
  double std = 1;
};

/// Population mean/std over every element. Throws on zero variance.
ZScoreStats fit_zscore(const ImageTensor& t);
ImageTensor apply_zscore(const ImageTensor& t, const ZScoreStats& stats);
/// apply_zscore(t, fit_zscore(t)).
ImageTensor zscore_normalize(const ImageTensor& t);

/// Half-pixel-centre bilinear resampling of [H,W] with edge clamping.
ImageTensor resize_bilinear(const ImageTensor& slice, std::size_t out_h, std::size_t out_w);
/// Every axial slice of [D,H,W] resized to [D,out_h,out_w].
ImageTensor resize_volume(const ImageTensor& volume, std::size_t out_h, std::size_t out_w);

/// Model-input encoding of a label map: label / (k-1).
ImageTensor labels_to_intensity(const SegMask& labels, int k = 4);

struct AugmentSpec {
  bool bias_field = true;
  int bias_order = 3;
  double bias_max_coeff = 0.5;

  bool noise = true;
  double noise_sigma_max = 0.25;

  bool gamma = true;
  double gamma_lo = -0.3;
  double gamma_hi = 0.3;

  bool ghosting = true;
  int ghosts_min = 4;
  int ghosts_max = 10;
  double ghost_amplitude = 0.1;

  bool flips = true;
  double flip_prob = 0.5;

  bool affine = true;
  double affine_degrees = 35.0;

  bool rotation = true;
  double rotation_degrees = 15.0;

  static AugmentSpec none();
};

struct Augmented {
  ImageTensor slice;
  SegMask seg;
};

/// Intensity augmentations touch only the image; spatial ones move image and
/// labels together (labels always nearest-neighbour). Order: bias field,
/// noise, gamma, ghosting, flips, affine rotation, rotation.
Augmented augment(const ImageTensor& slice, const SegMask& seg, const AugmentSpec& spec, RngStream& rng);

// Individual transforms, exposed for tests and for callers that want one.
ImageTensor apply_bias_field(const ImageTensor& slice, const std::vector<double>& coeffs, int order);
ImageTensor apply_gamma(const ImageTensor& slice, double g);
ImageTensor apply_ghosting(const ImageTensor& slice, int n_ghosts, double amplitude, int axis);
template <typename T>
Tensor<T> flip(const Tensor<T>& slice, int axis);
/// Rotation about the slice centre, edge-clamped; nearest-neighbour or bilinear.
template <typename T>
Tensor<T> rotate(const Tensor<T>& slice, double degrees, bool bilinear);

}  // namespace strega::prep

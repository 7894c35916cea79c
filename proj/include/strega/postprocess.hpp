#pragma once

#include <cstddef>
#include <vector>

#include "strega/tensor.hpp"

namespace strega::post {

inline constexpr std::size_t kOtsuBins = 256;

/// max(x, 0) elementwise.
ImageTensor clamp_negatives(const ImageTensor& residual);

struct OtsuResult {
  double threshold = 0;
  /// Chosen split: bins 0..bin are background.
  std::size_t bin = 0;
  BinMask mask;
};

/// 256-bin histogram over [min, max] of the slice. The split maximising the
/// between-class variance is found by exact integer arithmetic (bin indices
/// stand in for intensities, which leaves the argmax unchanged); ties go to the
/// lower bin. threshold = upper edge of the chosen bin and mask = pixels in
/// higher bins. A constant slice yields threshold = that value, empty mask.
OtsuResult otsu_threshold(const ImageTensor& slice);

/// Histogram bin of value v for a slice spanning [lo, hi].
std::size_t otsu_bin(double v, double lo, double hi);

BinMask erode(const BinMask& mask, std::size_t se_size);
BinMask dilate(const BinMask& mask, std::size_t se_size);
/// Erosion then dilation with a square se_size x se_size element (odd); pixels
/// outside the slice count as background.
BinMask morph_open(const BinMask& mask, std::size_t se_size);

/// 4-connected component labels of a [H,W] mask (0 = background, 1..n in
/// raster order of first pixel). Returns n.
std::size_t label_components(const BinMask& mask, std::vector<std::size_t>& labels);

/// Drops 4-connected components with fewer than area_threshold pixels.
BinMask area_filter(const BinMask& mask, std::size_t area_threshold);

/// Nearest-neighbour resize of each slice to orig_h x orig_w, stacked to
/// [D, orig_h, orig_w].
BinMask restore_and_stack(const std::vector<BinMask>& masks, std::size_t orig_h, std::size_t orig_w);
BinMask resize_nearest(const BinMask& slice, std::size_t out_h, std::size_t out_w);

struct PostprocConfig {
  std::size_t se_size = 3;
  std::size_t area_threshold = 10;
  /// 0 keeps the residual's own in-plane size.
  std::size_t out_h = 0, out_w = 0;

  /// Defaults scaled to a model side: area threshold 10 at 64, times (side/64)^2.
  static PostprocConfig for_side(std::size_t side);
};

/// clamp -> per-slice Otsu -> opening -> area filter -> restore and stack,
/// for a [D,H,W] residual volume (or a single [H,W] slice, returned as [1,H,W]).
BinMask run_postprocess(const ImageTensor& residual, const PostprocConfig& cfg);

}  // namespace strega::post

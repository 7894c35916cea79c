#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "strega/tensor.hpp"

namespace strega::eval {

/// 2|P & G| / (|P| + |G|); both empty scores 1.
double dice(const BinMask& pred, const BinMask& gt);

/// Area under the precision-recall curve of `scores` against `gt`, with
/// pixels sorted by descending score, tied scores entering together, and the
/// area summed as precision times recall increment. Throws
/// DegenerateInputError when gt has no positives.
double auprc(const ImageTensor& scores, const BinMask& gt);

struct TTestResult {
  double t = 0;
  std::size_t df = 0;
  double p = 1;
};

/// Two-sided paired Student t-test on d = a - b.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Regularised incomplete beta I_x(a, b) (continued fraction, modified Lentz).
double incomplete_beta(double a, double b, double x);

struct SummaryStats {
  double mean = 0, std = 0, median = 0, q1 = 0, q3 = 0, min = 0, max = 0;
  std::size_t n = 0;
};

/// Sample std (n-1); quantiles by linear interpolation between order
/// statistics at position q*(n-1).
SummaryStats summary_stats(const std::vector<double>& values);

/// Half-open box: lo inclusive, hi exclusive, one entry per axis of the mask.
struct Box {
  std::vector<std::size_t> lo, hi;
  friend bool operator==(const Box&, const Box&) = default;
};

/// One box per 4-connected (2D) or 6-connected (3D) component, ordered by the
/// raster position of each component's first pixel.
std::vector<Box> bounding_boxes(const BinMask& mask);

/// Component labels for a [H,W] or [D,H,W] mask; returns the component count.
std::size_t label_components_nd(const BinMask& mask, std::vector<std::size_t>& labels);

/// Intersection over union. Throws ValidationError on a degenerate box.
double bbox_iou(const Box& a, const Box& b);

struct EvalRecord {
  std::size_t case_id = 0;
  std::string kind;
  double dice = 0;
  std::optional<double> auprc;  // undefined for healthy cases
  std::size_t n_pred_components = 0;
  std::vector<Box> boxes_pred, boxes_gt;
  std::size_t pred_voxels = 0, gt_voxels = 0, brain_voxels = 0;
  /// Best-IoU match of each gt box among the predicted boxes.
  std::vector<double> gt_box_iou;
};

/// Dice, AUPRC on the clamped residual, boxes and areas for one case.
EvalRecord evaluate_case(std::size_t case_id, const std::string& kind, const BinMask& pred, const BinMask& gt,
                         const ImageTensor& residual, const BinMask& brain);

}  // namespace strega::eval

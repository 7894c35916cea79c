#include "strega/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace strega::eval {

double dice(const BinMask& pred, const BinMask& gt) {
  require_same_dims(pred.dims(), gt.dims(), "dice");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double auprc(const ImageTensor& scores, const BinMask& gt) {
  require_same_dims(scores.dims(), gt.dims(), "auprc");
  const std::size_t positives = static_cast<std::size_t>(std::count_if(gt.span().begin(), gt.span().end(),
                                                                        [](std::uint8_t v) { return v != 0; }));
  if (positives == 0) throw DegenerateInputError("AUPRC is undefined without positive pixels");
  if (!scores.all_finite()) throw ValidationError("AUPRC scores contain non-finite values");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0, prev_recall = 0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) {
      tp += gt[order[i]] != 0;
      ++seen;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    area += precision * (recall - prev_recall);
    prev_recall = recall;
  }
  return area;
}

double incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw ValidationError("incomplete beta needs a, b > 0");
  if (x < 0 || x > 1) throw ValidationError("incomplete beta needs x in [0,1]");
  if (x == 0 || x == 1) return x;
  if (x > (a + 1) / (a + b + 2)) return 1.0 - incomplete_beta(b, a, 1.0 - x);
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  constexpr double tiny = 1e-300, eps = 1e-16;
  double c = 1, d = 1 - (a + b) * x / (a + 1);
  if (std::abs(d) < tiny) d = tiny;
  d = 1 / d;
  double f = d;
  for (int m = 1; m <= 10000; ++m) {
    const double md = m;
    double num = md * (b - md) * x / ((a + 2 * md - 1) * (a + 2 * md));
    d = 1 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    f *= d * c;
    num = -(a + md) * (a + b + md) * x / ((a + 2 * md) * (a + 2 * md + 1));
    d = 1 + num * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1 + num / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1 / d;
    const double delta = d * c;
    f *= delta;
    if (std::abs(delta - 1) < eps) break;
  }
  return std::exp(ln_front) * f / a;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("paired t-test needs equal-length samples");
  if (a.size() < 2) throw ValidationError("paired t-test needs at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.df = n - 1;
  if (sd == 0) {
    // Identical samples: no evidence of a difference.
    if (mean == 0) return r;
    throw DegenerateInputError("paired differences have zero variance");
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const double df = static_cast<double>(r.df);
  r.p = incomplete_beta(df / 2, 0.5, df / (df + r.t * r.t));
  return r;
}

SummaryStats summary_stats(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("summary statistics of an empty sample");
  std::vector<double> v = values;
  std::sort(v.begin(), v.end());
  SummaryStats s;
  s.n = v.size();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(s.n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.n - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  s.min = v.front();
  s.max = v.back();
  s.q1 = quantile(0.25);
  s.median = quantile(0.5);
  s.q3 = quantile(0.75);
  return s;
}

std::size_t label_components_nd(const BinMask& mask, std::vector<std::size_t>& labels) {
  if (mask.rank() != 2 && mask.rank() != 3) {
    throw ShapeError("component labelling expects [H,W] or [D,H,W], got " + dims_to_string(mask.dims()));
  }
  const std::size_t depth = mask.rank() == 3 ? mask.dim(0) : 1;
  const std::size_t h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1), plane = h * w;
  labels.assign(mask.size(), 0);
  std::size_t next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || labels[start]) continue;
    labels[start] = ++next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t z = i / plane, r = (i % plane) / w, c = i % w;
      auto visit = [&](std::size_t j) {
        if (mask[j] && !labels[j]) {
          labels[j] = next;
          stack.push_back(j);
        }
      };
      if (z > 0) visit(i - plane);
      if (z + 1 < depth) visit(i + plane);
      if (r > 0) visit(i - w);
      if (r + 1 < h) visit(i + w);
      if (c > 0) visit(i - 1);
      if (c + 1 < w) visit(i + 1);
    }
  }
  return next;
}

std::vector<Box> bounding_boxes(const BinMask& mask) {
  std::vector<std::size_t> labels;
  const std::size_t n = label_components_nd(mask, labels);
  const std::size_t rank = mask.rank();
  std::vector<Box> boxes(n, Box{std::vector<std::size_t>(rank, std::numeric_limits<std::size_t>::max()),
                                std::vector<std::size_t>(rank, 0)});
  std::vector<std::size_t> coord(rank);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!labels[i]) continue;
    std::size_t rem = i;
    for (std::size_t a = rank; a-- > 0;) {
      coord[a] = rem % mask.dim(a);
      rem /= mask.dim(a);
    }
    Box& b = boxes[labels[i] - 1];
    for (std::size_t a = 0; a < rank; ++a) {
      b.lo[a] = std::min(b.lo[a], coord[a]);
      b.hi[a] = std::max(b.hi[a], coord[a] + 1);
    }
  }
  return boxes;
}

double bbox_iou(const Box& a, const Box& b) {
  if (a.lo.size() != a.hi.size() || b.lo.size() != b.hi.size() || a.lo.size() != b.lo.size() || a.lo.empty()) {
    throw ValidationError("boxes must share a rank >= 1");
  }
  double va = 1, vb = 1, vi = 1;
  for (std::size_t k = 0; k < a.lo.size(); ++k) {
    if (a.lo[k] >= a.hi[k] || b.lo[k] >= b.hi[k]) throw ValidationError("degenerate box (lo >= hi)");
    va *= static_cast<double>(a.hi[k] - a.lo[k]);
    vb *= static_cast<double>(b.hi[k] - b.lo[k]);
    const std::size_t lo = std::max(a.lo[k], b.lo[k]), hi = std::min(a.hi[k], b.hi[k]);
    vi *= hi > lo ? static_cast<double>(hi - lo) : 0.0;
  }
  return vi / (va + vb - vi);
}

EvalRecord evaluate_case(std::size_t case_id, const std::string& kind, const BinMask& pred, const BinMask& gt,
                         const ImageTensor& residual, const BinMask& brain) {
  require_same_dims(pred.dims(), gt.dims(), "evaluate_case");
  require_same_dims(residual.dims(), gt.dims(), "evaluate_case residual");
  require_same_dims(brain.dims(), gt.dims(), "evaluate_case brain");
  EvalRecord r;
  r.case_id = case_id;
  r.kind = kind;
  r.dice = dice(pred, gt);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    r.pred_voxels += pred[i] != 0;
    r.gt_voxels += gt[i] != 0;
    r.brain_voxels += brain[i] != 0;
  }
  if (r.gt_voxels > 0) {
    ImageTensor scores = residual;
    for (auto& v : scores.values()) v = std::max(v, 0.0f);
    r.auprc = auprc(scores, gt);
  }
  r.boxes_pred = bounding_boxes(pred);
  r.boxes_gt = bounding_boxes(gt);
  r.n_pred_components = r.boxes_pred.size();
  for (const Box& g : r.boxes_gt) {
    double best = 0;
    for (const Box& p : r.boxes_pred) best = std::max(best, bbox_iou(g, p));
    r.gt_box_iou.push_back(best);
  }
  return r;
}

}  // namespace strega::eval

#include "strega/postprocess.hpp"

#include <algorithm>
#include <cmath>

namespace strega::post {

namespace {

void require_slice(const BinMask& m, const char* what) {
  if (m.rank() != 2) throw ShapeError(std::string(what) + " expects a [H,W] mask, got " + dims_to_string(m.dims()));
}

void require_odd(std::size_t se_size) {
  if (se_size == 0 || se_size % 2 == 0) {
    throw ValidationError("structuring element size must be odd and >= 1, got " + std::to_string(se_size));
  }
}

// One separable pass of a square min/max filter along `axis`. For erosion a
// window reaching outside the slice yields 0.
BinMask window_pass(const BinMask& in, std::size_t half, int axis, bool erode_mode) {
  const std::size_t h = in.dim(0), w = in.dim(1);
  const std::size_t len = axis == 0 ? h : w, lines = axis == 0 ? w : h;
  BinMask out(in.dims(), 0);
  std::vector<std::size_t> prefix(len + 1);
  for (std::size_t line = 0; line < lines; ++line) {
    auto at = [&](std::size_t i) -> std::uint8_t { return axis == 0 ? in.at(i, line) : in.at(line, i); };
    prefix[0] = 0;
    for (std::size_t i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + (at(i) != 0);
    for (std::size_t i = 0; i < len; ++i) {
      std::uint8_t v;
      if (erode_mode) {
        if (i < half || i + half >= len) {
          v = 0;
        } else {
          v = prefix[i + half + 1] - prefix[i - half] == 2 * half + 1;
        }
      } else {
        const std::size_t a = i >= half ? i - half : 0, b = std::min(len, i + half + 1);
        v = prefix[b] - prefix[a] > 0;
      }
      (axis == 0 ? out.at(i, line) : out.at(line, i)) = v;
    }
  }
  return out;
}

}  // namespace

ImageTensor clamp_negatives(const ImageTensor& residual) {
  ImageTensor out = residual;
  for (auto& v : out.values()) v = std::max(v, 0.0f);
  return out;
}

std::size_t otsu_bin(double v, double lo, double hi) {
  const double f = (v - lo) / (hi - lo) * static_cast<double>(kOtsuBins);
  if (!(f > 0)) return 0;
  return std::min(kOtsuBins - 1, static_cast<std::size_t>(f));
}

OtsuResult otsu_threshold(const ImageTensor& slice) {
  if (!slice.all_finite()) throw ValidationError("Otsu threshold of a slice with non-finite values");
  OtsuResult r;
  r.mask = BinMask(slice.dims(), 0);
  const auto [lo_it, hi_it] = std::minmax_element(slice.values().begin(), slice.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    r.threshold = lo;
    return r;
  }
  std::vector<std::uint64_t> hist(kOtsuBins, 0);
  std::vector<std::size_t> bins(slice.size());
  for (std::size_t i = 0; i < slice.size(); ++i) {
    bins[i] = otsu_bin(slice[i], lo, hi);
    ++hist[bins[i]];
  }
  using i128 = __int128;
  using u128 = unsigned __int128;
  const auto n = static_cast<i128>(slice.size());
  i128 s_total = 0;
  for (std::size_t b = 0; b < kOtsuBins; ++b) s_total += static_cast<i128>(b) * hist[b];

  // sigma_between^2 * n^2 = (n1*s0 - n0*s1)^2 / (n0*n1); compare as fractions.
  bool have = false;
  u128 best_num = 0, best_den = 1;
  i128 n0 = 0, s0 = 0;
  for (std::size_t k = 0; k + 1 < kOtsuBins; ++k) {
    n0 += hist[k];
    s0 += static_cast<i128>(k) * hist[k];
    const i128 n1 = n - n0, s1 = s_total - s0;
    if (n0 == 0 || n1 == 0) continue;
    const i128 d = n1 * s0 - n0 * s1;
    const u128 num = static_cast<u128>(d < 0 ? -d : d) * static_cast<u128>(d < 0 ? -d : d);
    const u128 den = static_cast<u128>(n0) * static_cast<u128>(n1);
    if (!have || num * best_den > best_num * den) {
      have = true;
      best_num = num;
      best_den = den;
      r.bin = k;
    }
  }
  r.threshold = lo + static_cast<double>(r.bin + 1) * (hi - lo) / static_cast<double>(kOtsuBins);
  for (std::size_t i = 0; i < slice.size(); ++i) r.mask[i] = bins[i] > r.bin;
  return r;
}

BinMask erode(const BinMask& mask, std::size_t se_size) {
  require_slice(mask, "erode");
  require_odd(se_size);
  const std::size_t half = se_size / 2;
  return window_pass(window_pass(mask, half, 1, true), half, 0, true);
}

BinMask dilate(const BinMask& mask, std::size_t se_size) {
  require_slice(mask, "dilate");
  require_odd(se_size);
  const std::size_t half = se_size / 2;
  return window_pass(window_pass(mask, half, 1, false), half, 0, false);
}

BinMask morph_open(const BinMask& mask, std::size_t se_size) { return dilate(erode(mask, se_size), se_size); }

std::size_t label_components(const BinMask& mask, std::vector<std::size_t>& labels) {
  require_slice(mask, "label_components");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
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
      const std::size_t r = i / w, c = i % w;
      auto visit = [&](std::size_t j) {
        if (mask[j] && !labels[j]) {
          labels[j] = next;
          stack.push_back(j);
        }
      };
      if (r > 0) visit(i - w);
      if (r + 1 < h) visit(i + w);
      if (c > 0) visit(i - 1);
      if (c + 1 < w) visit(i + 1);
    }
  }
  return next;
}

BinMask area_filter(const BinMask& mask, std::size_t area_threshold) {
  require_slice(mask, "area_filter");
  std::vector<std::size_t> labels;
  const std::size_t n = label_components(mask, labels);
  std::vector<std::size_t> area(n + 1, 0);
  for (std::size_t l : labels) ++area[l];
  BinMask out(mask.dims(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = labels[i] != 0 && area[labels[i]] >= area_threshold;
  return out;
}

BinMask resize_nearest(const BinMask& slice, std::size_t out_h, std::size_t out_w) {
  require_slice(slice, "resize_nearest");
  if (out_h == 0 || out_w == 0) throw ValidationError("resize target dims must be >= 1");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  if (h == out_h && w == out_w) return slice;
  BinMask out({out_h, out_w});
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t sy = std::min(h - 1, (2 * i + 1) * h / (2 * out_h));
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t sx = std::min(w - 1, (2 * j + 1) * w / (2 * out_w));
      out.at(i, j) = slice.at(sy, sx);
    }
  }
  return out;
}

BinMask restore_and_stack(const std::vector<BinMask>& masks, std::size_t orig_h, std::size_t orig_w) {
  if (masks.empty()) throw ValidationError("restore_and_stack needs at least one slice");
  for (const auto& m : masks) {
    require_slice(m, "restore_and_stack");
    require_same_dims(m.dims(), masks.front().dims(), "restore_and_stack slice");
  }
  BinMask out({masks.size(), orig_h, orig_w});
  for (std::size_t d = 0; d < masks.size(); ++d) out.set_slice(d, resize_nearest(masks[d], orig_h, orig_w));
  return out;
}

PostprocConfig PostprocConfig::for_side(std::size_t side) {
  PostprocConfig c;
  c.area_threshold = static_cast<std::size_t>(std::lround(10.0 * static_cast<double>(side * side) / (64.0 * 64.0)));
  return c;
}

BinMask run_postprocess(const ImageTensor& residual, const PostprocConfig& cfg) {
  require_odd(cfg.se_size);
  ImageTensor vol = residual;
  if (vol.rank() == 2) vol.reshape({1, residual.dim(0), residual.dim(1)});
  if (vol.rank() != 3) throw ShapeError("postprocess expects [D,H,W] or [H,W], got " + dims_to_string(residual.dims()));
  if (!vol.all_finite()) throw ValidationError("residual contains non-finite values");
  const std::size_t depth = vol.dim(0);
  std::vector<BinMask> slices(depth);
  const auto n = static_cast<std::ptrdiff_t>(depth);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t d = 0; d < n; ++d) {
    const auto idx = static_cast<std::size_t>(d);
    BinMask m = otsu_threshold(clamp_negatives(vol.slice(idx))).mask;
    m = morph_open(m, cfg.se_size);
    slices[idx] = area_filter(m, cfg.area_threshold);
  }
  const std::size_t oh = cfg.out_h ? cfg.out_h : vol.dim(1), ow = cfg.out_w ? cfg.out_w : vol.dim(2);
  return restore_and_stack(slices, oh, ow);
}

}  // namespace strega::post

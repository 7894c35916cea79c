#include "strega/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace strega::prep {

namespace {

std::size_t nearest_centroid(double v, const std::vector<double>& c) {
  std::size_t best = 0;
  double best_d = std::abs(v - c[0]);
  for (std::size_t j = 1; j < c.size(); ++j) {
    const double d = std::abs(v - c[j]);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

// Plane geometry of a [H,W] or [D,H,W] grid.
struct Planes {
  std::size_t depth, h, w;
};

Planes planes_of(const Dims& d) {
  if (d.size() == 2) return {1, d[0], d[1]};
  if (d.size() == 3) return {d[0], d[1], d[2]};
  throw ShapeError("expected a [H,W] slice or [D,H,W] volume, got " + dims_to_string(d));
}

}  // namespace

std::pair<SegMask, std::vector<double>> kmeans_intensity(const ImageTensor& volume, int k) {
  planes_of(volume.dims());
  if (k < 1 || k > 255) throw ValidationError("k must be in [1,255]");
  const std::size_t n = volume.size();
  std::vector<double> sorted(volume.values().begin(), volume.values().end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  if (distinct < static_cast<std::size_t>(k)) {
    throw DegenerateInputError("segmentation needs at least " + std::to_string(k) + " distinct intensities, found " +
                               std::to_string(distinct));
  }
  sorted.assign(volume.values().begin(), volume.values().end());
  std::sort(sorted.begin(), sorted.end());

  const auto kk = static_cast<std::size_t>(k);
  std::vector<double> c(kk);
  for (std::size_t i = 0; i < kk; ++i) {
    const double pos = (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(kk)) *
                       static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n - 1);
    c[i] = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  }

  std::vector<std::uint8_t> assign(n, 0), previous;
  std::vector<double> sums(kk);
  std::vector<std::size_t> counts(kk);
  auto assign_all = [&]() {
    std::fill(counts.begin(), counts.end(), 0);
    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = volume[i];
      const std::size_t j = nearest_centroid(v, c);
      assign[i] = static_cast<std::uint8_t>(j);
      ++counts[j];
      sums[j] += v;
    }
  };

  for (int iter = 0; iter < 500; ++iter) {
    assign_all();
    // An empty cluster takes over the point worst served by the current
    // centroids; quantile seeds collide whenever one intensity dominates.
    for (std::size_t guard = 0; guard < kk; ++guard) {
      const auto empty = std::find(counts.begin(), counts.end(), std::size_t{0});
      if (empty == counts.end()) break;
      std::size_t far = 0;
      double far_d = -1;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::abs(volume[i] - c[assign[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      c[static_cast<std::size_t>(empty - counts.begin())] = volume[far];
      assign_all();
    }
    if (assign == previous) break;
    previous = assign;
    for (std::size_t j = 0; j < kk; ++j) {
      if (counts[j] > 0) c[j] = sums[j] / static_cast<double>(counts[j]);
    }
  }

  std::vector<std::size_t> order(kk);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return c[a] < c[b]; });
  std::vector<std::uint8_t> rank(kk);
  std::vector<double> sorted_c(kk);
  for (std::size_t r = 0; r < kk; ++r) {
    rank[order[r]] = static_cast<std::uint8_t>(r);
    sorted_c[r] = c[order[r]];
  }
  SegMask labels(volume.dims());
  for (std::size_t i = 0; i < n; ++i) labels[i] = rank[assign[i]];
  return {std::move(labels), std::move(sorted_c)};
}

SegMask segment_tissues(const ImageTensor& volume, RngStream& rng, const SegmentOptions& options) {
  if (options.icm_iters < 0) throw ValidationError("icm_iters must be >= 0");
  if (options.beta < 0) throw ValidationError("beta must be >= 0");
  auto [labels, centroids] = kmeans_intensity(volume, options.k);
  const Planes g = planes_of(volume.dims());
  const auto kk = static_cast<std::size_t>(options.k);
  const std::size_t n = volume.size();

  std::vector<double> mean(kk), var(kk);
  auto estimate = [&]() {
    std::vector<double> s(kk, 0.0), s2(kk, 0.0);
    std::vector<std::size_t> cnt(kk, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = volume[i];
      s[labels[i]] += v;
      s2[labels[i]] += v * v;
      ++cnt[labels[i]];
    }
    for (std::size_t l = 0; l < kk; ++l) {
      if (cnt[l] == 0) continue;  // keep the previous parameters of a vanished class
      const double m = s[l] / static_cast<double>(cnt[l]);
      mean[l] = m;
      var[l] = std::max(s2[l] / static_cast<double>(cnt[l]) - m * m, 1e-6);
    }
  };
  mean = centroids;
  std::fill(var.begin(), var.end(), 1e-6);
  estimate();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> energy(kk);
  const std::size_t plane = g.h * g.w;
  for (int sweep = 0; sweep < options.icm_iters; ++sweep) {
    rng.shuffle(std::span<std::size_t>(order));
    std::size_t changed = 0;
    for (std::size_t idx : order) {
      const std::size_t r = (idx % plane) / g.w, col = idx % g.w;
      const double v = volume[idx];
      std::uint8_t nb[4];
      int n_nb = 0;
      if (r > 0) nb[n_nb++] = labels[idx - g.w];
      if (r + 1 < g.h) nb[n_nb++] = labels[idx + g.w];
      if (col > 0) nb[n_nb++] = labels[idx - 1];
      if (col + 1 < g.w) nb[n_nb++] = labels[idx + 1];
      for (std::size_t l = 0; l < kk; ++l) {
        const double d = v - mean[l];
        int disagree = 0;
        for (int q = 0; q < n_nb; ++q) disagree += nb[q] != l;
        energy[l] = d * d / (2 * var[l]) + 0.5 * std::log(var[l]) + options.beta * disagree;
      }
      std::size_t best = labels[idx];
      for (std::size_t l = 0; l < kk; ++l) {
        if (energy[l] < energy[best]) best = l;  // ties keep the current label
      }
      if (best != labels[idx]) {
        labels[idx] = static_cast<std::uint8_t>(best);
        ++changed;
      }
    }
    if (changed == 0) break;
    estimate();
  }
  return labels;
}

ZScoreStats fit_zscore(const ImageTensor& t) {
  if (t.size() < 2) throw DegenerateInputError("z-score needs at least two elements");
  double s = 0;
  for (float v : t.span()) s += v;
  const double mean = s / static_cast<double>(t.size());
  double ss = 0;
  for (float v : t.span()) ss += (v - mean) * (v - mean);
  const double var = ss / static_cast<double>(t.size());
  if (!(var > 0)) throw DegenerateInputError("z-score of a constant tensor");
  return {mean, std::sqrt(var)};
}

ImageTensor apply_zscore(const ImageTensor& t, const ZScoreStats& stats) {
  if (!(stats.std > 0)) throw ValidationError("z-score std must be positive");
  ImageTensor out = t;
  for (auto& v : out.values()) v = static_cast<float>((v - stats.mean) / stats.std);
  return out;
}

ImageTensor zscore_normalize(const ImageTensor& t) { return apply_zscore(t, fit_zscore(t)); }

ImageTensor resize_bilinear(const ImageTensor& slice, std::size_t out_h, std::size_t out_w) {
  if (slice.rank() != 2) throw ShapeError("resize expects a [H,W] slice, got " + dims_to_string(slice.dims()));
  if (out_h == 0 || out_w == 0) throw ValidationError("resize target dims must be >= 1");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  if (h == out_h && w == out_w) return slice;
  ImageTensor out({out_h, out_w});
  auto axis = [](std::size_t i, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t i = 0; i < out_h; ++i) {
    std::size_t y0, y1;
    double fy;
    axis(i, h, out_h, y0, y1, fy);
    for (std::size_t j = 0; j < out_w; ++j) {
      std::size_t x0, x1;
      double fx;
      axis(j, w, out_w, x0, x1, fx);
      const double top = (1 - fx) * slice.at(y0, x0) + fx * slice.at(y0, x1);
      const double bot = (1 - fx) * slice.at(y1, x0) + fx * slice.at(y1, x1);
      out.at(i, j) = static_cast<float>((1 - fy) * top + fy * bot);
    }
  }
  return out;
}

ImageTensor resize_volume(const ImageTensor& volume, std::size_t out_h, std::size_t out_w) {
  if (volume.rank() != 3) throw ShapeError("expected a [D,H,W] volume, got " + dims_to_string(volume.dims()));
  ImageTensor out({volume.dim(0), out_h, out_w});
  for (std::size_t d = 0; d < volume.dim(0); ++d) out.set_slice(d, resize_bilinear(volume.slice(d), out_h, out_w));
  return out;
}

ImageTensor labels_to_intensity(const SegMask& labels, int k) {
  if (k < 2) throw ValidationError("label encoding needs k >= 2");
  ImageTensor out(labels.dims());
  const float scale = 1.0f / static_cast<float>(k - 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) throw ValidationError("label " + std::to_string(labels[i]) + " out of range");
    out[i] = static_cast<float>(labels[i]) * scale;
  }
  return out;
}

AugmentSpec AugmentSpec::none() {
  AugmentSpec s;
  s.bias_field = s.noise = s.gamma = s.ghosting = s.flips = s.affine = s.rotation = false;
  return s;
}

ImageTensor apply_bias_field(const ImageTensor& slice, const std::vector<double>& coeffs, int order) {
  if (slice.rank() != 2) throw ShapeError("bias field expects a [H,W] slice");
  const auto n_terms = static_cast<std::size_t>((order + 1) * (order + 2) / 2);
  if (coeffs.size() != n_terms) throw ValidationError("bias field needs " + std::to_string(n_terms) + " coefficients");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  auto coord = [](std::size_t i, std::size_t n) {
    return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
  };
  ImageTensor out = slice;
  for (std::size_t r = 0; r < h; ++r) {
    const double y = coord(r, h);
    for (std::size_t c = 0; c < w; ++c) {
      const double x = coord(c, w);
      double e = 0;
      std::size_t t = 0;
      for (int i = 0; i <= order; ++i)
        for (int j = 0; j <= order - i; ++j) e += coeffs[t++] * std::pow(x, i) * std::pow(y, j);
      out.at(r, c) = static_cast<float>(slice.at(r, c) * std::exp(e));
    }
  }
  return out;
}

ImageTensor apply_gamma(const ImageTensor& slice, double g) {
  const auto [lo_it, hi_it] = std::minmax_element(slice.values().begin(), slice.values().end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return slice;
  const double p = std::exp(g);
  ImageTensor out = slice;
  for (auto& v : out.values()) {
    const double u = (v - lo) / (hi - lo);
    v = static_cast<float>(std::pow(u, p) * (hi - lo) + lo);
  }
  return out;
}

ImageTensor apply_ghosting(const ImageTensor& slice, int n_ghosts, double amplitude, int axis) {
  if (slice.rank() != 2) throw ShapeError("ghosting expects a [H,W] slice");
  if (axis != 0 && axis != 1) throw ValidationError("ghosting axis must be 0 or 1");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  const std::size_t len = axis == 0 ? h : w;
  ImageTensor out = slice;
  for (int k = 1; k <= n_ghosts; ++k) {
    const std::size_t shift = (static_cast<std::size_t>(k) * len / static_cast<std::size_t>(n_ghosts + 1)) % len;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t sr = axis == 0 ? (r + len - shift) % len : r;
        const std::size_t sc = axis == 1 ? (c + len - shift) % len : c;
        out.at(r, c) += static_cast<float>(amplitude * slice.at(sr, sc));
      }
  }
  return out;
}

template <typename T>
Tensor<T> flip(const Tensor<T>& slice, int axis) {
  if (slice.rank() != 2) throw ShapeError("flip expects a [H,W] slice");
  if (axis != 0 && axis != 1) throw ValidationError("flip axis must be 0 or 1");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  Tensor<T> out(slice.dims());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      out.at(r, c) = axis == 0 ? slice.at(h - 1 - r, c) : slice.at(r, w - 1 - c);
    }
  return out;
}

template <typename T>
Tensor<T> rotate(const Tensor<T>& slice, double degrees, bool bilinear) {
  if (slice.rank() != 2) throw ShapeError("rotate expects a [H,W] slice");
  const std::size_t h = slice.dim(0), w = slice.dim(1);
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double maxy = static_cast<double>(h - 1), maxx = static_cast<double>(w - 1);
  Tensor<T> out(slice.dims());
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double y = static_cast<double>(r) - cy, x = static_cast<double>(c) - cx;
      // Inverse map: output pixel samples the source rotated by -degrees.
      const double sy = std::clamp(cs * y + sn * x + cy, 0.0, maxy);
      const double sx = std::clamp(-sn * y + cs * x + cx, 0.0, maxx);
      if constexpr (std::is_floating_point_v<T>) {
        if (bilinear) {
          const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
          const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
          const double top = (1 - fx) * slice.at(y0, x0) + fx * slice.at(y0, x1);
          const double bot = (1 - fx) * slice.at(y1, x0) + fx * slice.at(y1, x1);
          out.at(r, c) = static_cast<T>((1 - fy) * top + fy * bot);
          continue;
        }
      } else {
        if (bilinear) throw ValidationError("bilinear rotation of a label grid");
      }
      out.at(r, c) = slice.at(static_cast<std::size_t>(std::lround(sy)), static_cast<std::size_t>(std::lround(sx)));
    }
  return out;
}

template ImageTensor flip(const ImageTensor&, int);
template SegMask flip(const SegMask&, int);
template ImageTensor rotate(const ImageTensor&, double, bool);
template SegMask rotate(const SegMask&, double, bool);

Augmented augment(const ImageTensor& slice, const SegMask& seg, const AugmentSpec& spec, RngStream& rng) {
  require_same_dims(slice.dims(), seg.dims(), "augment");
  if (slice.rank() != 2) throw ShapeError("augment expects [H,W] slices");
  Augmented a{slice, seg};
  if (spec.bias_field) {
    std::vector<double> coeffs(static_cast<std::size_t>((spec.bias_order + 1) * (spec.bias_order + 2) / 2));
    for (auto& c : coeffs) c = rng.uniform(-spec.bias_max_coeff, spec.bias_max_coeff);
    a.slice = apply_bias_field(a.slice, coeffs, spec.bias_order);
  }
  if (spec.noise) {
    const double sigma = rng.uniform(0.0, spec.noise_sigma_max);
    for (auto& v : a.slice.values()) v = static_cast<float>(v + sigma * rng.normal());
  }
  if (spec.gamma) a.slice = apply_gamma(a.slice, rng.uniform(spec.gamma_lo, spec.gamma_hi));
  if (spec.ghosting) {
    const auto n = static_cast<int>(rng.uniform_int(spec.ghosts_min, spec.ghosts_max));
    const auto axis = static_cast<int>(rng.uniform_int(0, 1));
    a.slice = apply_ghosting(a.slice, n, spec.ghost_amplitude, axis);
  }
  if (spec.flips) {
    for (int axis : {1, 0}) {
      if (rng.bernoulli(spec.flip_prob)) {
        a.slice = flip(a.slice, axis);
        a.seg = flip(a.seg, axis);
      }
    }
  }
  if (spec.affine) {
    const double deg = rng.uniform(-spec.affine_degrees, spec.affine_degrees);
    a.slice = rotate(a.slice, deg, false);
    a.seg = rotate(a.seg, deg, false);
  }
  if (spec.rotation) {
    const double deg = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees);
    a.slice = rotate(a.slice, deg, true);
    a.seg = rotate(a.seg, deg, false);
  }
  return a;
}

}  // namespace strega::prep

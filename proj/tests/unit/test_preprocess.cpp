#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "strega/preprocess.hpp"
#include "strega/synth.hpp"
#include "test_util.hpp"

using namespace strega;
using namespace strega::prep;
using strega::testing::max_abs_diff;
using strega::testing::random_tensor;

namespace {

// Lloyd iterations with brute-force nearest-centroid assignment, seeded at
// the (2i+1)/(2k) quantiles (linear interpolation between order statistics).
std::vector<int> lloyd_oracle(const std::vector<double>& v, int k) {
  std::vector<double> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> c(k);
  for (int i = 0; i < k; ++i) {
    const double pos = (2.0 * i + 1) / (2.0 * k) * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    c[i] = sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  }
  std::vector<int> lab(v.size(), -1);
  for (int it = 0; it < 1000; ++it) {
    bool changed = false;
    for (std::size_t n = 0; n < v.size(); ++n) {
      int best = 0;
      for (int j = 1; j < k; ++j) {
        if (std::abs(v[n] - c[j]) < std::abs(v[n] - c[best])) best = j;
      }
      changed |= best != lab[n];
      lab[n] = best;
    }
    if (!changed) break;
    for (int j = 0; j < k; ++j) {
      double s = 0;
      int cnt = 0;
      for (std::size_t n = 0; n < v.size(); ++n) {
        if (lab[n] == j) {
          s += v[n];
          ++cnt;
        }
      }
      if (cnt) c[j] = s / cnt;
    }
  }
  return lab;
}

}  // namespace

TEST_CASE("four flat regions are recovered exactly") {
  ImageTensor img({8, 8});
  SegMask truth({8, 8});
  const float levels[4] = {0.0f, 0.33f, 0.66f, 1.0f};
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const std::size_t l = (i / 4) * 2 + (j / 4);
      img.at(i, j) = levels[l];
      truth.at(i, j) = static_cast<std::uint8_t>(l);
    }
  RngStream r(1);
  CHECK(segment_tissues(img, r) == truth);
}

TEST_CASE("icm_iters = 0 agrees with the brute-force k-means oracle") {
  RngStream r(2);
  for (int trial = 0; trial < 10; ++trial) {
    ImageTensor img({16, 16});
    for (auto& v : img.values()) v = static_cast<float>(0.3 * static_cast<double>(r.uniform_int(0, 3)) + 0.04 * r.normal());
    std::vector<double> vals(img.values().begin(), img.values().end());
    const auto oracle = lloyd_oracle(vals, 4);
    SegmentOptions opt;
    opt.icm_iters = 0;
    RngStream sr(3);
    const SegMask seg = segment_tissues(img, sr, opt);
    for (std::size_t i = 0; i < seg.size(); ++i) REQUIRE(seg[i] == oracle[i]);
  }
}

TEST_CASE("k-means centroids are sorted and labels follow them") {
  RngStream r(4);
  const auto img = random_tensor<float>({20, 20}, r, 0, 1);
  const auto [labels, cents] = kmeans_intensity(img, 4);
  CHECK(std::is_sorted(cents.begin(), cents.end()));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = img[i];
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(v - cents[labels[i]]) <= std::abs(v - cents[j]) + 1e-12);
  }
}

TEST_CASE("constant image is degenerate") {
  RngStream r(5);
  CHECK_THROWS_AS(segment_tissues(ImageTensor({6, 6}, 0.5f), r), DegenerateInputError);
  ImageTensor three({6, 6});
  for (std::size_t i = 0; i < three.size(); ++i) three[i] = static_cast<float>(i % 3);
  CHECK_THROWS_AS(segment_tissues(three, r), DegenerateInputError);
}

TEST_CASE("ICM removes isolated label flips on a phantom") {
  RngStream r(6);
  synth::PhantomConfig pc;
  pc.depth = pc.height = pc.width = 32;
  pc.noise_sigma = 0.06;
  const auto ph = synth::make_phantom(pc, r);
  SegmentOptions none;
  none.icm_iters = 0;
  RngStream a(1), b(1);
  const SegMask km = segment_tissues(ph.volume, a, none);
  const SegMask icm = segment_tissues(ph.volume, b);
  auto agreement = [&](const SegMask& s) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < s.size(); ++i) ok += s[i] == ph.tissue[i];
    return static_cast<double>(ok) / static_cast<double>(s.size());
  };
  CHECK(agreement(icm) >= agreement(km));
  CHECK(agreement(icm) > 0.95);
}

TEST_CASE("zscore examples") {
  const auto two = zscore_normalize(ImageTensor({2}, std::vector<float>{0, 2}));
  CHECK(two[0] == doctest::Approx(-1));
  CHECK(two[1] == doctest::Approx(1));
  RngStream r(7);
  const auto x = random_tensor<float>({50, 40}, r, -3, 8);
  const auto z = zscore_normalize(x);
  double s = 0, ss = 0;
  for (float v : z.span()) s += v;
  const double mean = s / static_cast<double>(z.size());
  for (float v : z.span()) ss += (v - mean) * (v - mean);
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(ss / static_cast<double>(z.size()) - 1) < 1e-5);
  CHECK(max_abs_diff(zscore_normalize(z), z) < 1e-6);
  CHECK_THROWS_AS(fit_zscore(ImageTensor({3, 3}, 2.0f)), DegenerateInputError);
}

TEST_CASE("bilinear resize: constant, identity and the half-pixel oracle") {
  const ImageTensor c({5, 7}, 0.25f);
  const auto cr = resize_bilinear(c, 9, 3);
  for (float v : cr.span()) CHECK(v == 0.25f);
  RngStream r(8);
  const auto x = random_tensor<float>({6, 6}, r);
  CHECK(resize_bilinear(x, 6, 6) == x);

  const ImageTensor s({2, 2}, std::vector<float>{0, 1, 2, 3});
  const auto up = resize_bilinear(s, 4, 4);
  auto src = [](double o) { return std::clamp((o + 0.5) * 0.5 - 0.5, 0.0, 1.0); };
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double y = src(static_cast<double>(i)), xx = src(static_cast<double>(j));
      // f(y, x) = 2y + x on the 2x2 grid, and bilinear reproduces it exactly.
      CHECK(up.at(i, j) == doctest::Approx(2 * y + xx).epsilon(1e-6));
    }
}

TEST_CASE("labels_to_intensity spreads labels over [0,1]") {
  SegMask l({4}, std::vector<std::uint8_t>{0, 1, 2, 3});
  const auto v = labels_to_intensity(l);
  CHECK(v[0] == 0.0f);
  CHECK(v[1] == doctest::Approx(1.0 / 3));
  CHECK(v[3] == 1.0f);
  CHECK_THROWS_AS(labels_to_intensity(SegMask({1}, std::vector<std::uint8_t>{4})), ValidationError);
}

TEST_CASE("augment with everything off is the identity") {
  RngStream r(9);
  const auto x = random_tensor<float>({16, 16}, r);
  const SegMask s({16, 16}, 2);
  const auto out = augment(x, s, AugmentSpec::none(), r);
  CHECK(out.slice == x);
  CHECK(out.seg == s);
}

TEST_CASE("individual transforms") {
  RngStream r(10);
  const auto x = random_tensor<float>({12, 10}, r, 0.1, 1);
  CHECK(max_abs_diff(apply_bias_field(x, std::vector<double>(10, 0.0), 3), x) == 0);
  CHECK(flip(flip(x, 0), 0) == x);
  CHECK(flip(flip(x, 1), 1) == x);
  CHECK(flip(x, 1).at(0, 0) == x.at(0, 9));
  CHECK(max_abs_diff(rotate(x, 0.0, true), x) < 1e-6);
  CHECK(max_abs_diff(apply_gamma(x, 0.0), x) < 1e-6);
  CHECK(max_abs_diff(apply_ghosting(x, 4, 0.0, 0), x) == 0);

  // 90 degree turn of a square image moves the top row to a side column.
  ImageTensor sq({5, 5});
  for (std::size_t j = 0; j < 5; ++j) sq.at(0, j) = 1.0f;
  const auto turned = rotate(sq, 90.0, false);
  std::size_t ones = 0;
  for (float v : turned.span()) ones += v == 1.0f;
  CHECK(ones == 5);
  const bool left = turned.at(0, 0) == 1.0f && turned.at(4, 0) == 1.0f;
  const bool right = turned.at(0, 4) == 1.0f && turned.at(4, 4) == 1.0f;
  CHECK((left || right));
}

TEST_CASE("spatial augmentation moves labels with the image") {
  RngStream r(11);
  ImageTensor x({16, 16});
  SegMask s({16, 16});
  for (std::size_t i = 4; i < 9; ++i)
    for (std::size_t j = 3; j < 7; ++j) {
      x.at(i, j) = 1.0f;
      s.at(i, j) = 1;
    }
  AugmentSpec spec = AugmentSpec::none();
  spec.flips = true;
  spec.affine = true;
  for (int t = 0; t < 20; ++t) {
    const auto out = augment(x, s, spec, r);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK((out.slice[i] == 1.0f) == (out.seg[i] == 1));
  }
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <queue>

#include "strega/postprocess.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace strega;
using namespace strega::post;
using strega::testing::random_mask;
using strega::testing::random_tensor;

using namespace strega::oracle;

TEST_CASE("clamp_negatives") {
  const ImageTensor r({3}, std::vector<float>{-1, 0, 2});
  const auto c = clamp_negatives(r);
  CHECK(c[0] == 0.0f);
  CHECK(c[2] == 2.0f);
}

TEST_CASE("Otsu bin equals exhaustive search on random slices") {
  RngStream r(1);
  for (int t = 0; t < 100; ++t) {
    ImageTensor s({16, 16});
    const double split = r.uniform(0.2, 0.8);
    for (auto& v : s.values()) v = static_cast<float>(r.bernoulli(split) ? r.normal() * 0.5 : 2 + r.normal() * 0.7);
    REQUIRE(otsu_threshold(s).bin == otsu_bin(s));
  }
  for (int t = 0; t < 20; ++t) {
    const auto s = random_tensor<float>({16, 16}, r);
    REQUIRE(otsu_threshold(s).bin == otsu_bin(s));
  }
}

TEST_CASE("Otsu: bimodal split, constant slice, non-finite input") {
  ImageTensor s({4, 4}, 0.0f);
  for (std::size_t i = 0; i < 4; ++i) s.at(i, 3) = 10.0f;
  const auto res = otsu_threshold(s);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(res.mask.at(i, j) == (j == 3));
  const auto flat = otsu_threshold(ImageTensor({5, 5}, 3.0f));
  CHECK(flat.threshold == 3.0);
  for (auto v : flat.mask.span()) CHECK(v == 0);
  ImageTensor bad({2, 2});
  bad[1] = std::numeric_limits<float>::infinity();
  CHECK_THROWS_AS(otsu_threshold(bad), ValidationError);
}

TEST_CASE("Otsu mask is invariant under positive rescaling") {
  RngStream r(2);
  for (int t = 0; t < 20; ++t) {
    const auto s = random_tensor<float>({12, 12}, r, 0, 1);
    ImageTensor scaled = s;
    for (auto& v : scaled.values()) v *= 4.0f;
    CHECK(otsu_threshold(s).mask == otsu_threshold(scaled).mask);
  }
}

TEST_CASE("opening equals naive erosion then dilation") {
  RngStream r(3);
  for (int t = 0; t < 100; ++t) {
    const auto m = random_mask({12, 12}, r, r.uniform(0.3, 0.9));
    for (std::size_t se : {1u, 3u, 5u}) {
      REQUIRE(erode(m, se) == naive_erode(m, se));
      REQUIRE(dilate(m, se) == naive_dilate(m, se));
      REQUIRE(morph_open(m, se) == naive_dilate(naive_erode(m, se), se));
    }
  }
  CHECK_THROWS_AS(morph_open(BinMask({4, 4}), 2), ValidationError);
}

TEST_CASE("opening with se 3 removes a lone pixel and keeps a 3x3 block") {
  BinMask m({9, 9});
  m.at(1, 1) = 1;
  for (std::size_t i = 4; i < 7; ++i)
    for (std::size_t j = 4; j < 7; ++j) m.at(i, j) = 1;
  const auto o = morph_open(m, 3);
  CHECK(o.at(1, 1) == 0);
  CHECK(o.at(5, 5) == 1);
  CHECK(o.at(4, 4) == 1);
}

TEST_CASE("area filter equals the flood-fill census") {
  RngStream r(4);
  for (int t = 0; t < 100; ++t) {
    const auto m = random_mask({20, 20}, r, r.uniform(0.2, 0.6));
    const std::size_t thr = static_cast<std::size_t>(r.uniform_int(0, 15));
    REQUIRE(area_filter(m, thr) == census_filter(m, thr));
  }
}

TEST_CASE("component labels are raster ordered and 4-connected") {
  BinMask m({3, 3}, std::vector<std::uint8_t>{1, 0, 1, 0, 1, 0, 1, 0, 1});
  std::vector<std::size_t> lab;
  CHECK(label_components(m, lab) == 5);
  CHECK(lab[0] == 1);
  CHECK(lab[2] == 2);
  CHECK(lab[8] == 5);
}

TEST_CASE("nearest resize and restore_and_stack") {
  BinMask s({2, 2}, std::vector<std::uint8_t>{1, 0, 0, 1});
  const auto up = resize_nearest(s, 4, 4);
  CHECK(up.at(0, 0) == 1);
  CHECK(up.at(1, 1) == 1);
  CHECK(up.at(0, 2) == 0);
  CHECK(up.at(3, 3) == 1);
  CHECK(resize_nearest(up, 2, 2) == s);
  const auto st = restore_and_stack({s, s, s}, 4, 4);
  CHECK(st.dims() == Dims{3, 4, 4});
  CHECK(st.slice(2) == up);
}

TEST_CASE("run_postprocess composes the stages in order") {
  RngStream r(5);
  ImageTensor vol({3, 16, 16});
  for (auto& v : vol.values()) v = static_cast<float>(r.normal() * 0.1);
  for (std::size_t i = 4; i < 10; ++i)
    for (std::size_t j = 5; j < 11; ++j) vol.at(1, i, j) = 3.0f;
  PostprocConfig cfg;
  cfg.out_h = cfg.out_w = 32;
  const auto got = run_postprocess(vol, cfg);
  std::vector<BinMask> slices;
  for (std::size_t z = 0; z < 3; ++z) {
    const auto o = otsu_threshold(clamp_negatives(vol.slice(z)));
    slices.push_back(area_filter(morph_open(o.mask, cfg.se_size), cfg.area_threshold));
  }
  CHECK(got == restore_and_stack(slices, 32, 32));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 32 * 32; ++i) hits += got[32 * 32 + i];
  CHECK(hits == 4 * 36);

  const auto single = run_postprocess(vol.slice(1), PostprocConfig{});
  CHECK(single.dims() == Dims{1, 16, 16});
  ImageTensor bad = vol;
  bad[7] = std::nanf("");
  CHECK_THROWS_AS(run_postprocess(bad, cfg), ValidationError);
}

TEST_CASE("area threshold default scales with the square of the side") {
  CHECK(PostprocConfig::for_side(64).area_threshold == 10);
  CHECK(PostprocConfig::for_side(128).area_threshold == 40);
  CHECK(PostprocConfig::for_side(256).area_threshold == 160);
}

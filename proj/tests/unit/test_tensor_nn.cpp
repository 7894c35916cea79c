#include <doctest.h>

#include <cmath>
#include <set>

#include "strega/kernels.hpp"
#include "strega/nn.hpp"
#include "strega/reference.hpp"
#include "test_util.hpp"

using namespace strega;
using strega::testing::max_abs;
using strega::testing::max_abs_diff;
using strega::testing::random_tensor;

TEST_CASE("tensor rejects rank 0 and zero-sized axes") {
  CHECK_THROWS_AS(ImageTensor(Dims{}), ShapeError);
  CHECK_THROWS_AS(ImageTensor(Dims{2, 0, 3}), ShapeError);
  CHECK_THROWS_AS(ImageTensor(Dims{2, 2}, std::vector<float>(3)), ShapeError);
  ImageTensor t({2, 3});
  CHECK_THROWS_AS(t.reshape({4}), ShapeError);
  t.reshape({3, 2});
  CHECK(t.dim(0) == 3);
}

TEST_CASE("require_same_dims names the first differing axis") {
  try {
    require_same_dims({2, 3, 4}, {2, 5, 4}, "ctx");
    FAIL("expected a throw");
  } catch (const ShapeError& e) {
    CHECK(e.axis() == 1);
  }
}

TEST_CASE("rng streams are reproducible and children ignore parent draws") {
  RngStream a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  RngStream fresh(42);
  CHECK(a.child("x").next_u64() == fresh.child("x").next_u64());
  CHECK(fresh.child("x").next_u64() != fresh.child("y").next_u64());
  CHECK(fresh.child_seed("x") == fresh.child("x").seed());
}

TEST_CASE("rng uniform_int stays in range and hits both ends") {
  RngStream r(3);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = r.uniform_int(-2, 2);
    REQUIRE(v >= -2);
    REQUIRE(v <= 2);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("rng normal has unit moments") {
  RngStream r(11);
  const int n = 200000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    ss += v * v;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  // 5 standard errors.
  CHECK(std::abs(mean) < 5.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

TEST_CASE("conv2d matches the naive loop") {
  RngStream r(1);
  struct Case {
    std::size_t b, cin, cout, h, k, s, p;
  };
  for (const Case c : {Case{2, 3, 4, 8, 4, 2, 1}, Case{1, 1, 2, 5, 3, 1, 1}, Case{3, 2, 3, 7, 1, 1, 0},
                       Case{2, 4, 2, 9, 3, 2, 0}}) {
    const auto x = random_tensor<double>({c.b, c.cin, c.h, c.h}, r);
    const auto w = random_tensor<double>({c.cout, c.cin, c.k, c.k}, r);
    const auto bias = random_tensor<double>({c.cout}, r);
    const auto fast = kernels::conv2d_forward(x, w, &bias, c.s, c.p);
    const auto slow = reference::conv2d(x, w, &bias, c.s, c.p);
    REQUIRE(fast.dims() == slow.dims());
    CHECK(max_abs_diff(fast, slow) < 1e-12);

    const auto xf = x.cast<float>(), wf = w.cast<float>();
    const auto ff = kernels::conv2d_forward(xf, wf, static_cast<const ImageTensor*>(nullptr), c.s, c.p);
    const auto sf = reference::conv2d(xf, wf, static_cast<const ImageTensor*>(nullptr), c.s, c.p);
    CHECK(max_abs_diff(ff, sf) <= 1e-5 * std::max(1.0, max_abs(sf)));
  }
}

TEST_CASE("transposed convolution matches the scatter loop and is the adjoint") {
  RngStream r(2);
  const std::size_t b = 2, cout = 3, cin = 2, h = 4, k = 4, s = 2, p = 1;
  const auto w = random_tensor<double>({cout, cin, k, k}, r);
  const auto y = random_tensor<double>({b, cout, h, h}, r);
  const std::size_t ho = kernels::conv_transpose_out_extent(h, k, s, p);
  CHECK(ho == 8);
  const auto fast = kernels::conv2d_backward_input(y, w, ho, ho, s, p);
  const auto slow = reference::conv_transpose2d(y, w, static_cast<const Tensor<double>*>(nullptr), s, p);
  CHECK(max_abs_diff(fast, slow) < 1e-12);

  const auto x = random_tensor<double>({b, cin, ho, ho}, r);
  const auto cx = reference::conv2d(x, w, static_cast<const Tensor<double>*>(nullptr), s, p);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * fast[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("conv weight gradient equals the patch-sum oracle") {
  RngStream r(3);
  const std::size_t b = 2, cin = 2, cout = 3, h = 6, k = 3, s = 1, p = 1;
  const auto x = random_tensor<double>({b, cin, h, h}, r);
  const auto gy = random_tensor<double>({b, cout, h, h}, r);
  Tensor<double> gw({cout, cin, k, k}), gb({cout});
  kernels::conv2d_backward_weights(x, gy, s, p, gw, &gb);
  Tensor<double> ow({cout, cin, k, k}), ob({cout});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < h; ++j) {
          ob[o] += gy.at(n, o, i, j);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t u = 0; u < k; ++u)
              for (std::size_t v = 0; v < k; ++v) {
                const long rr = static_cast<long>(i + u) - 1, qq = static_cast<long>(j + v) - 1;
                if (rr < 0 || qq < 0 || rr >= static_cast<long>(h) || qq >= static_cast<long>(h)) continue;
                ow.at(o, c, u, v) += gy.at(n, o, i, j) * x.at(n, c, static_cast<std::size_t>(rr), static_cast<std::size_t>(qq));
              }
        }
  CHECK(max_abs_diff(gw, ow) < 1e-12);
  CHECK(max_abs_diff(gb, ob) < 1e-12);
}

TEST_CASE("dense layer forward and backward against loops") {
  RngStream r(4);
  const auto x = random_tensor<double>({3, 5}, r);
  const auto w = random_tensor<double>({4, 5}, r);
  const auto b = random_tensor<double>({4}, r);
  CHECK(max_abs_diff(kernels::dense_forward(x, w, b), reference::dense(x, w, b)) < 1e-12);
  const auto gy = random_tensor<double>({3, 4}, r);
  Tensor<double> gw({4, 5}), gb({4});
  const auto gx = kernels::dense_backward(x, w, gy, gw, gb);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) {
      double acc = 0;
      for (std::size_t o = 0; o < 4; ++o) acc += gy.at(i, o) * w.at(o, c);
      CHECK(gx.at(i, c) == doctest::Approx(acc).epsilon(1e-12));
    }
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t c = 0; c < 5; ++c) {
      double acc = 0;
      for (std::size_t i = 0; i < 3; ++i) acc += gy.at(i, o) * x.at(i, c);
      CHECK(gw.at(o, c) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("batch norm training pass matches two-pass statistics") {
  RngStream r(5);
  auto st = nn::make_batch_norm<double>(3);
  for (auto& v : st.gamma.values()) v = r.uniform(0.5, 1.5);
  for (auto& v : st.beta.values()) v = r.uniform(-1, 1);
  const auto x = random_tensor<double>({4, 3, 5, 5}, r, -2, 3);
  const auto y = nn::batch_norm(x, st, nn::NormMode::kTrainNoUpdate);
  CHECK(max_abs_diff(y, reference::batch_norm(x, st.gamma, st.beta, st.epsilon)) < 1e-12);
  CHECK(st.running_mean[0] == 0.0);
}

TEST_CASE("batch norm running statistics follow the momentum rule") {
  auto st = nn::make_batch_norm<double>(1);
  Tensor<double> x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  nn::batch_norm(x, st, nn::NormMode::kTrain);
  CHECK(st.running_mean[0] == doctest::Approx(0.1 * 2.5));
  // Unbiased batch variance 5/3 enters the running estimate.
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)));
  const auto y = nn::batch_norm(x, st, nn::NormMode::kEval);
  CHECK(y[0] == doctest::Approx((1 - st.running_mean[0]) / std::sqrt(st.running_var[0] + st.epsilon)));
}

TEST_CASE("batch norm backward matches central differences") {
  RngStream r(6);
  auto st = nn::make_batch_norm<double>(2);
  for (auto& v : st.gamma.values()) v = r.uniform(0.5, 1.5);
  auto x = random_tensor<double>({3, 2, 2, 2}, r);
  const auto gy = random_tensor<double>({3, 2, 2, 2}, r);
  nn::BatchNormCache<double> cache;
  nn::batch_norm(x, st, nn::NormMode::kTrainNoUpdate, &cache);
  Tensor<double> gg({2}), gbeta({2});
  const auto gx = nn::batch_norm_backward(gy, st, cache, gg, gbeta);
  auto objective = [&](const Tensor<double>& in) {
    const auto out = nn::batch_norm(in, st, nn::NormMode::kTrainNoUpdate);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * gy[i];
    return s;
  };
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = objective(x);
    x[i] = keep - h;
    const double down = objective(x);
    x[i] = keep;
    CHECK(gx[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("leaky relu and its backward") {
  Tensor<double> x({4}, std::vector<double>{-2, -0.5, 0.5, 3});
  kernels::leaky_relu_inplace(x, 0.2);
  CHECK(x[0] == doctest::Approx(-0.4));
  CHECK(x[3] == 3);
  Tensor<double> g({4}, 1.0);
  kernels::leaky_relu_backward_inplace(g, x, 0.2);
  CHECK(g[0] == doctest::Approx(0.2));
  CHECK(g[2] == 1.0);
}

TEST_CASE("adam step follows the bias-corrected update") {
  std::vector<float> p{1.0f, -2.0f};
  const std::vector<float> g{0.5f, -1.0f};
  auto st = nn::make_adam(2, 0.1);
  std::vector<double> m(2), v(2), ref{1.0, -2.0};
  for (int t = 1; t <= 3; ++t) {
    nn::adam_step(std::span<float>(p), std::span<const float>(g), st);
    for (std::size_t i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(p[i] == doctest::Approx(ref[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("adam rejects a non-finite gradient without touching state") {
  std::vector<float> p{1.0f, 2.0f};
  const std::vector<float> g{0.5f, std::nanf("")};
  auto st = nn::make_adam(2, 0.1);
  CHECK_THROWS_AS(nn::adam_step(std::span<float>(p), std::span<const float>(g), st), NonFiniteGradientError);
  CHECK(p[0] == 1.0f);
  CHECK(st.step_count == 0);
}

TEST_CASE("conv layer wrapper: transposed layer consumes out_ch channels") {
  RngStream r(7);
  auto layer = nn::make_conv<float>(8, 4, 4, 2, 1, true, r);
  CHECK(layer.consumed_channels() == 8);
  CHECK(layer.produced_channels() == 4);
  const auto y = nn::conv2d(random_tensor<float>({1, 8, 3, 3}, r), layer);
  CHECK(y.dims() == Dims{1, 4, 6, 6});
  const double bound = std::sqrt(1.0 / (8 * 16));
  CHECK(max_abs(layer.weights) <= bound);
}

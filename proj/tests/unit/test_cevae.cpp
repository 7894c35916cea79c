#include <doctest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>

#include "strega/cevae.hpp"
#include "strega/gradcheck.hpp"
#include "test_util.hpp"

using namespace strega;
using namespace strega::vae;
using strega::testing::random_tensor;

namespace {

// KL(N(mu, s^2) || N(0,1)) by numerical integration of q log(q/p).
double kl_quadrature(double mu, double logvar) {
  const double s = std::exp(0.5 * logvar);
  auto integrand = [&](double z) {
    const double lq = -0.5 * std::log(2 * M_PI) - std::log(s) - 0.5 * (z - mu) * (z - mu) / (s * s);
    const double lp = -0.5 * std::log(2 * M_PI) - 0.5 * z * z;
    return std::exp(lq) * (lq - lp);
  };
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(integrand, mu - 14 * s, mu + 14 * s, 15, 1e-13);
}

std::size_t expected_parameter_count(std::size_t side) {
  const std::size_t flat = 256 * (side / 8) * (side / 8);
  auto block = [](std::size_t cin, std::size_t cout, std::size_t produced) {
    return cout * cin * 16 + produced + 2 * produced + produced * produced + produced + 2 * produced;
  };
  std::size_t n = block(1, 64, 64) + block(64, 128, 128) + block(128, 256, 256);
  n += 2 * (flat * 256 + 256) + (256 * flat + flat);
  // Decoder weights keep the [consumed, produced, k, k] layout of the adjoint.
  n += block(128, 256, 128) + block(64, 128, 64);
  n += 64 * 1 * 16 + 1;
  return n;
}

}  // namespace

TEST_CASE("architecture: feature maps, latent size and parameter count") {
  RngStream r(1);
  auto m = init_model(64, r);
  const auto enc = encoder_signature(m), dec = decoder_signature(m);
  CHECK(enc[0] == std::pair<std::size_t, std::size_t>{1, 64});
  CHECK(enc[1] == std::pair<std::size_t, std::size_t>{64, 128});
  CHECK(enc[2] == std::pair<std::size_t, std::size_t>{128, 256});
  CHECK(dec[0] == std::pair<std::size_t, std::size_t>{256, 128});
  CHECK(dec[1] == std::pair<std::size_t, std::size_t>{128, 64});
  CHECK(dec[2] == std::pair<std::size_t, std::size_t>{64, 1});
  CHECK(m.latent == 256);
  CHECK(parameter_count(m) == expected_parameter_count(64));
  CHECK(parameter_count(m) == 14022913);
  CHECK_THROWS_AS(init_model(48, r), ValidationError);
}

TEST_CASE("encode and decode shapes, logvar clamp") {
  RngStream r(2);
  auto m = init_model(32, r);
  const auto x = random_tensor<float>({3, 1, 32, 32}, r);
  const auto post = encode(x, m);
  CHECK(post.mu.dims() == Dims{3, 256});
  for (float v : post.logvar.span()) {
    CHECK(v >= kLogvarMin);
    CHECK(v <= kLogvarMax);
  }
  const auto y = decode(post.mu, m, nn::NormMode::kEval);
  CHECK(y.dims() == Dims{3, 1, 32, 32});
  CHECK_THROWS_AS(encode(random_tensor<float>({1, 1, 16, 16}, r), m), ShapeError);
}

TEST_CASE("kl_loss matches numerical integration") {
  RngStream r(3);
  for (int i = 0; i < 20; ++i) {
    const double mu = r.uniform(-3, 3), lv = r.uniform(-4, 3);
    Tensor<double> m({1, 1}, std::vector<double>{mu}), v({1, 1}, std::vector<double>{lv});
    CHECK(kl_loss(m, v) == doctest::Approx(kl_quadrature(mu, lv)).epsilon(1e-9));
  }
}

TEST_CASE("kl_loss is the batch mean of per-sample sums") {
  Tensor<double> mu({2, 2}, std::vector<double>{0, 1, 2, 0}), lv({2, 2}, std::vector<double>{0, 0, 0, std::log(2.0)});
  // sample 0: 0 + 0.5; sample 1: 2 + 0.5*(2 - 1 - log 2)
  const double expect = 0.5 * (0.5 + 2 + 0.5 * (1 - std::log(2.0)));
  CHECK(kl_loss(mu, lv) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(kl_loss(Tensor<double>({1, 3}), Tensor<double>({1, 3})) == 0.0);
}

TEST_CASE("rec_loss is the pixel mean of squared error") {
  Tensor<double> a({1, 1, 1, 2}, std::vector<double>{1, 2}), b({1, 1, 1, 2}, std::vector<double>{0, 4});
  CHECK(rec_loss(a, b) == doctest::Approx(2.5));
}

TEST_CASE("reparameterize_with is mu + exp(logvar/2) eps") {
  Tensor<double> mu({1, 2}, std::vector<double>{1, -1}), lv({1, 2}, std::vector<double>{0, 2}),
      eps({1, 2}, std::vector<double>{0.5, 2});
  const auto z = reparameterize_with(mu, lv, eps);
  CHECK(z[0] == doctest::Approx(1.5));
  CHECK(z[1] == doctest::Approx(-1 + std::exp(1.0) * 2));
}

TEST_CASE("context masks: rectangle count, size bounds, fill") {
  RngStream r(4);
  MaskSpec spec;
  for (int trial = 0; trial < 200; ++trial) {
    const auto rects = draw_mask_rects(32, 32, spec, r);
    REQUIRE(rects.size() >= 1);
    REQUIRE(rects.size() <= 3);
    for (const Rect& q : rects) {
      CHECK(q.y1 <= 32);
      CHECK(q.x1 <= 32);
      CHECK(q.y1 - q.y0 >= 4);   // ceil(0.1 * 32)
      CHECK(q.y1 - q.y0 <= 9);   // floor(0.3 * 32)
      CHECK(q.x1 - q.x0 >= 4);
      CHECK(q.x1 - q.x0 <= 9);
    }
  }
  ImageTensor x({2, 1, 16, 16}, 5.0f);
  const auto masked = context_mask(x, spec, r);
  std::size_t filled = 0;
  for (float v : masked.span()) filled += v == 0.0f;
  CHECK(filled > 0);
  CHECK(filled < masked.size());
}

TEST_CASE("loss breakdown bookkeeping is exact") {
  RngStream r(5);
  auto m = init_model(16, r);
  const auto x = random_tensor<float>({2, 1, 16, 16}, r);
  for (const LossWeights w : {LossWeights{1, 1, 1}, LossWeights{0.5, 2, 0}, LossWeights{0, 1, 3}}) {
    RngStream lr(9);
    const auto out = cevae_loss(x, m, MaskSpec{}, w, lr);
    CHECK(out.loss.total == w.kl * out.loss.kl + w.vae * out.loss.rec_vae + w.ce * out.loss.rec_ce);
    CHECK(out.loss.kl >= 0);
    CHECK(out.loss.rec_vae >= 0);
    CHECK(out.loss.rec_ce >= 0);
  }
}

TEST_CASE("zero ce weight leaves the ce branch without gradient influence") {
  RngStream r(6);
  auto m = init_model(16, r);
  const auto x = random_tensor<float>({2, 1, 16, 16}, r);
  RngStream a(1), b(1);
  MaskSpec spec;
  const auto with_mask = cevae_loss(x, m, spec, LossWeights{1, 1, 0}, a);
  spec.fill_value = 3.0f;
  const auto other_mask = cevae_loss(x, m, spec, LossWeights{1, 1, 0}, b);
  CHECK(with_mask.loss.total == other_mask.loss.total);
  const auto ga = trainable_tensors(const_cast<ModelParams<float>&>(with_mask.grads));
  const auto gb = trainable_tensors(const_cast<ModelParams<float>&>(other_mask.grads));
  for (std::size_t i = 0; i < ga.size(); ++i) CHECK(*ga[i].tensor == *gb[i].tensor);
}

TEST_CASE("non-finite input raises a divergence error") {
  RngStream r(7);
  auto m = init_model(16, r);
  ImageTensor x({2, 1, 16, 16});
  x[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(cevae_loss(x, m, MaskSpec{}, LossWeights{}, r), DivergenceError);
}

TEST_CASE("analytic gradient agrees with central differences") {
  RngStream r(8);
  const auto m = init_model(16, r);
  const auto x = random_tensor<float>({2, 1, 16, 16}, r);
  GradCheckOptions opt;
  opt.n_samples = 60;
  RngStream gr(3);
  const auto rep = finite_diff_check(m, x, gr, opt);
  CHECK(rep.n_checked == 60);
  CHECK(rep.max_relative_error < 1e-4);
}

TEST_CASE("gradient check detects a corrupted gradient") {
  RngStream r(9);
  const auto m = init_model(16, r);
  const auto x = random_tensor<float>({2, 1, 16, 16}, r);
  GradCheckOptions opt;
  opt.n_samples = 30;
  opt.corrupt_sample = 5;
  RngStream gr(3);
  const auto rep = finite_diff_check(m, x, gr, opt);
  CHECK(rep.max_relative_error > 0.1);
}

TEST_CASE("training is deterministic and reduces the loss") {
  RngStream data_rng(10);
  ImageTensor data({16, 16, 16});
  for (std::size_t n = 0; n < 16; ++n)
    for (std::size_t i = 0; i < 16; ++i)
      for (std::size_t j = 0; j < 16; ++j) {
        const double di = i - 7.5, dj = j - 7.5;
        data.at(n, i, j) = (di * di + dj * dj < 30 + 2.0 * static_cast<double>(n % 4)) ? 1.0f : -1.0f;
      }
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch = 8;
  tc.lr = 1e-3;
  auto run = [&] {
    RngStream init(1), tr(2);
    return train(data, init_model(16, init), tc, tr);
  };
  const auto a = run(), b = run();
  REQUIRE(a.metrics.size() == 6);
  for (std::size_t e = 0; e < 6; ++e) {
    CHECK(std::isfinite(a.metrics[e].loss.total));
    CHECK(a.metrics[e].loss.total == b.metrics[e].loss.total);
  }
  CHECK(a.metrics.back().loss.total < a.metrics.front().loss.total);
  const auto res = anomaly_residual(data, a.params);
  CHECK(res.dims() == data.dims());
}

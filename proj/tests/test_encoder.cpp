#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mvrl/encoder.hpp"

using mvrl::Encoder;
using mvrl::EncoderConfig;
using mvrl::Rng;
using mvrl::Shape;
using mvrl::Tensor;
using D = Tensor<double>;

namespace {

// Independent fold of the conv output-size arithmetic.
int fold_extent(const EncoderConfig& c) {
  int hw = c.input_hw;
  for (int i = 0; i < c.layer_count(); ++i)
    hw = (hw + 2 * c.paddings[i] - c.kernels[i]) / c.strides[i] + 1;
  return hw;
}

}  // namespace

TEST_CASE("desk-scale encoder emits a 6x6 map of 32 channels", "[encoder]") {
  auto cfg = EncoderConfig::desk_default();
  cfg.validate();
  REQUIRE(cfg.output_hw() == fold_extent(cfg));
  REQUIRE(cfg.output_hw() == 6);
  REQUIRE(cfg.out_channels() == 32);

  Rng rng(3, 0);
  Encoder<double> enc(cfg, rng);
  D obs = D::rand_uniform({3, 32, 32}, rng, 0.0, 1.0);
  auto z = enc.encode(obs);
  REQUIRE(z.shape() == Shape{32, 6, 6});
  for (double v : z.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("full-scale encoder config follows the stride arithmetic", "[encoder]") {
  auto cfg = EncoderConfig::full_scale();
  cfg.validate();
  REQUIRE(cfg.input_hw == 84);
  REQUIRE(cfg.layer_count() == 11);
  REQUIRE(cfg.output_hw() == fold_extent(cfg));

  Rng rng(4, 0);
  Encoder<float> enc(cfg, rng);
  auto z = enc.encode(Tensor<float>::rand_uniform({3, 84, 84}, rng, 0.f, 1.f));
  REQUIRE(z.shape() == Shape{32, cfg.output_hw(), cfg.output_hw()});
}

TEST_CASE("zero image through a zero-bias encoder maps to zero", "[encoder]") {
  Rng rng(5, 0);
  Encoder<double> enc(EncoderConfig::desk_default(), rng);
  auto z = enc.encode(D::zeros({3, 32, 32}));
  for (double v : z.data()) REQUIRE(v == 0.0);
}

TEST_CASE("encoder initialization is seed-reproducible", "[encoder]") {
  auto cfg = EncoderConfig::desk_default();
  Rng r1(77, 2), r2(77, 2), r3(77, 3);
  Encoder<double> a(cfg, r1), b(cfg, r2), c(cfg, r3);
  bool any_differs = false;
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    REQUIRE(a.layers()[i].w.data() == b.layers()[i].w.data());
    any_differs |= a.layers()[i].w.data() != c.layers()[i].w.data();
  }
  REQUIRE(any_differs);
}

TEST_CASE("orthogonal initialization hits its variance target", "[encoder]") {
  Rng rng(88, 0);
  // 32 x (32*5*5) = 25600 samples; semi-orthogonal rows with gain sqrt(2)
  // should give entry variance ~ gain^2 / fan = 2/800.
  auto w = mvrl::init_conv_weight<double>(32, 32, 5, rng, std::sqrt(2.0));
  double mean = 0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.numel());
  double var = 0;
  for (double v : w.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.numel());
  const double target = 2.0 / 800.0;
  REQUIRE(var > 0.8 * target);
  REQUIRE(var < 1.2 * target);

  // Rows must be orthonormal up to the gain.
  const int k = 32 * 5 * 5;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j <= i; ++j) {
      double dot = 0;
      for (int d = 0; d < k; ++d)
        dot += w.data()[i * k + d] * w.data()[j * k + d];
      REQUIRE(std::fabs(dot - (i == j ? 2.0 : 0.0)) < 1e-9);
    }

  // Tall matrices get orthonormal columns instead.
  auto tall = mvrl::init_linear_weight<double>(64, 8, rng, 1.0);
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b <= a; ++b) {
      double dot = 0;
      for (int r = 0; r < 64; ++r)
        dot += tall.data()[r * 8 + a] * tall.data()[r * 8 + b];
      REQUIRE(std::fabs(dot - (a == b ? 1.0 : 0.0)) < 1e-9);
    }
}

TEST_CASE("encode is a pure function of parameters and input", "[encoder]") {
  Rng rng(6, 0);
  Encoder<double> enc(EncoderConfig::desk_default(), rng);
  D obs = D::rand_uniform({3, 32, 32}, rng, 0.0, 1.0);
  auto z1 = enc.encode(obs);
  auto z2 = enc.encode(obs);
  REQUIRE(z1.data() == z2.data());

  // Batched encoding equals per-sample encoding.
  std::vector<double> two(obs.data());
  two.insert(two.end(), obs.data().begin(), obs.data().end());
  auto zb = enc.encode(D({2, 3, 32, 32}, two));
  REQUIRE(zb.shape() == Shape{2, 32, 6, 6});
  for (std::size_t i = 0; i < z1.numel(); ++i) {
    REQUIRE(zb.data()[i] == z1.data()[i]);
    REQUIRE(zb.data()[i + z1.numel()] == z1.data()[i]);
  }
}

TEST_CASE("gradients reach every encoder parameter", "[encoder]") {
  Rng rng(7, 0);
  Encoder<double> enc(EncoderConfig::desk_default(), rng);
  D obs = D::rand_uniform({3, 32, 32}, rng, 0.0, 1.0);
  mean(enc.encode(obs)).backward();
  std::vector<mvrl::Tensor<double>*> params;
  enc.collect_params(params);
  REQUIRE(params.size() == 8);  // 4 layers x (w, b)
  for (auto* p : params) {
    REQUIRE(p->has_grad());
    double mag = 0;
    for (double g : p->grad()) mag += std::fabs(g);
    REQUIRE(mag > 0.0);
  }
}

TEST_CASE("encoder rejects malformed inputs and configs", "[encoder]") {
  Rng rng(8, 0);
  Encoder<double> enc(EncoderConfig::desk_default(), rng);
  REQUIRE_THROWS_AS(enc.encode(D::zeros({3, 16, 16})), mvrl::ShapeError);
  REQUIRE_THROWS_AS(enc.encode(D::zeros({1, 32, 32})), mvrl::ShapeError);

  auto bad = EncoderConfig::desk_default();
  bad.strides = {2, 2, 1};
  REQUIRE_THROWS_AS(bad.validate(), mvrl::ConfigError);

  auto tiny = EncoderConfig::desk_default();
  tiny.input_hw = 8;
  tiny.paddings = {0, 0, 0, 0};
  REQUIRE_THROWS_AS(tiny.validate(), mvrl::ConfigError);
}

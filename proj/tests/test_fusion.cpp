#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mvrl/fusion.hpp"
#include "mvrl/gradcheck.hpp"
#include "test_support.hpp"

using mvrl::AttentionDirection;
using mvrl::FeatureMap;
using mvrl::Fusion;
using mvrl::FusionMode;
using mvrl::Rng;
using mvrl::Shape;
using mvrl::Tensor;
using mvrl::ViewId;
using D = Tensor<double>;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

// Reorders the flattened spatial positions of a [C,H,W] map.
D permute_positions(const D& z, const std::vector<int>& perm) {
  const int c = z.dim(0), p = z.dim(1) * z.dim(2);
  std::vector<double> out(z.numel());
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < p; ++j) out[ci * p + j] = z.data()[ci * p + perm[j]];
  return D(z.shape(), std::move(out));
}

mvrl::ViewProjection<double> identity_projection(int c) {
  mvrl::ViewProjection<double> p;
  p.ln_gain = D::full({c}, 1.0);
  p.ln_bias = D::zeros({c});
  std::vector<double> eye(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i) eye[i * c + i] = 1.0;
  p.qw = D({c, c}, eye);
  p.kw = D({c, c}, eye);
  p.vw = D({c, c}, std::move(eye));
  p.qb = D::zeros({c});
  p.kb = D::zeros({c});
  p.vb = D::zeros({c});
  return p;
}

// Standardizes each position's channel vector to exact mean 0, variance 1.
D standardized_map(int c, int h, int w, Rng& rng) {
  const int p = h * w;
  std::vector<double> m(static_cast<std::size_t>(c) * p);
  for (int j = 0; j < p; ++j) {
    double mu = 0, var = 0;
    std::vector<double> col(c);
    for (auto& v : col) {
      v = rng.uniform(-2.0, 2.0);
      mu += v;
    }
    mu /= c;
    for (double v : col) var += (v - mu) * (v - mu);
    var /= c;
    const double istd = 1.0 / std::sqrt(var);
    for (int ci = 0; ci < c; ++ci) m[ci * p + j] = (col[ci] - mu) * istd;
  }
  return D({c, h, w}, std::move(m));
}

}  // namespace

TEST_CASE("qkv embeddings reduce to the input under identity projections",
          "[fusion][qkv]") {
  Rng rng(101, 0);
  D z = standardized_map(4, 3, 3, rng);
  auto qkv = qkv_embed(z, identity_projection(4));
  REQUIRE(max_abs_diff(qkv.q.data(), z.data()) < 1e-4);
  REQUIRE(max_abs_diff(qkv.k.data(), z.data()) < 1e-4);
  REQUIRE(max_abs_diff(qkv.v.data(), z.data()) < 1e-4);
}

TEST_CASE("qkv embeddings are position-wise", "[fusion][qkv]") {
  Rng rng(102, 0);
  mvrl::ViewProjection<double> proj(4, rng);
  D z = D::rand_uniform({4, 2, 3}, rng, -1.0, 1.0);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  auto qkv = qkv_embed(z, proj);
  auto qkv_p = qkv_embed(permute_positions(z, perm), proj);
  REQUIRE(max_abs_diff(qkv_p.q.data(), permute_positions(D({4, 2, 3}, qkv.q.data()), perm).data()) < 1e-12);
  REQUIRE(max_abs_diff(qkv_p.v.data(), permute_positions(D({4, 2, 3}, qkv.v.data()), perm).data()) < 1e-12);
}

TEST_CASE("qkv embeddings match the per-position affine oracle", "[fusion][qkv]") {
  Rng rng(103, 0);
  mvrl::ViewProjection<double> proj(3, rng);
  D z = D::rand_uniform({3, 2, 2}, rng, -1.5, 1.5);
  auto qkv = qkv_embed(z, proj);
  auto normed = refimpl::layer_norm(z.data(), 3, 4, proj.ln_gain.data(),
                                    proj.ln_bias.data());
  auto q_ref = refimpl::pointwise_affine(normed, 3, 4, proj.qw.data(),
                                         proj.qb.data(), 3);
  auto k_ref = refimpl::pointwise_affine(normed, 3, 4, proj.kw.data(),
                                         proj.kb.data(), 3);
  REQUIRE(max_abs_diff(qkv.q.data(), q_ref) < 1e-6);
  REQUIRE(max_abs_diff(qkv.k.data(), k_ref) < 1e-6);
}

TEST_CASE("attention columns are uniform when all keys agree", "[fusion][attention]") {
  Rng rng(104, 0);
  // Every key position holds the same channel vector.
  std::vector<double> kdata;
  for (int c = 0; c < 4; ++c) {
    const double v = rng.uniform(-1.0, 1.0);
    for (int i = 0; i < 5; ++i) kdata.push_back(v);
  }
  D k({4, 5}, std::move(kdata));
  D q = D::rand_uniform({4, 3}, rng, -1.0, 1.0);
  auto a = mvrl::attention_weights(q, k);
  REQUIRE(a.shape() == Shape{5, 3});
  for (double v : a.data()) REQUIRE(std::fabs(v - 0.2) < 1e-12);
}

TEST_CASE("attention weights match the closed form at C=1", "[fusion][attention]") {
  auto a = mvrl::attention_weights(D({1, 1}, {1.0}), D({1, 2}, {2.0, 0.0}));
  const double e2 = std::exp(2.0);
  REQUIRE(a.shape() == Shape{2, 1});
  REQUIRE(std::fabs(a.data()[0] - e2 / (e2 + 1.0)) < 1e-9);
  REQUIRE(std::fabs(a.data()[1] - 1.0 / (e2 + 1.0)) < 1e-9);
}

TEST_CASE("attention weights match the nested-loop oracle", "[fusion][attention]") {
  Rng rng(105, 0);
  D q = D::rand_uniform({4, 3}, rng, -2.0, 2.0);
  D k = D::rand_uniform({4, 5}, rng, -2.0, 2.0);
  auto a = mvrl::attention_weights(q, k);
  auto ref = refimpl::attention(q.data(), k.data(), 4, 3, 5);
  REQUIRE(max_abs_diff(a.data(), ref) < 1e-6);
  for (int j = 0; j < 3; ++j) {
    double s = 0;
    for (int i = 0; i < 5; ++i) s += a.data()[i * 3 + j];
    REQUIRE(std::fabs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("attention columns normalize across many random instances",
          "[fusion][attention]") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed, 11);
    const int c = static_cast<int>(rng.uniform_int(1, 6));
    const int nq = static_cast<int>(rng.uniform_int(1, 9));
    const int nkv = static_cast<int>(rng.uniform_int(1, 9));
    auto a = mvrl::attention_weights(D::rand_uniform({c, nq}, rng, -5.0, 5.0),
                                     D::rand_uniform({c, nkv}, rng, -5.0, 5.0));
    for (int j = 0; j < nq; ++j) {
      double s = 0;
      for (int i = 0; i < nkv; ++i) {
        const double v = a.data()[i * nq + j];
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
        s += v;
      }
      REQUIRE(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("cross_attend with a zero key/value view keeps the residual path",
          "[fusion][attend]") {
  Rng rng(106, 0);
  Fusion<double> f(FusionMode::bidirectional, 4, rng);
  D zq = D::rand_uniform({4, 3, 3}, rng, -1.0, 1.0);
  auto out = f.cross_attend({zq, ViewId::ego}, {D::zeros({4, 3, 3}), ViewId::third});

  // All value biases are zero, so the lookup contributes nothing and the
  // output is the branch MLP of the post-normed query map alone.
  const auto& br = f.branch(ViewId::ego);
  auto manual = conv1x1(
      relu(conv1x1(layer_norm(zq, br.post_ln_gain, br.post_ln_bias), br.g1w, br.g1b)),
      br.g2w, br.g2b);
  REQUIRE(max_abs_diff(out.data(), manual.data()) < 1e-9);
}

TEST_CASE("cross_attend is invariant to key/value permutation and equivariant "
          "to query permutation", "[fusion][attend]") {
  Rng rng(107, 0);
  Fusion<double> f(FusionMode::bidirectional, 3, rng);
  D zq = D::rand_uniform({3, 2, 3}, rng, -1.0, 1.0);
  D zkv = D::rand_uniform({3, 2, 3}, rng, -1.0, 1.0);
  std::vector<int> perm{5, 2, 0, 4, 1, 3};

  auto base = f.cross_attend({zq, ViewId::ego}, {zkv, ViewId::third});
  auto kv_perm = f.cross_attend({zq, ViewId::ego},
                                {permute_positions(zkv, perm), ViewId::third});
  REQUIRE(max_abs_diff(base.data(), kv_perm.data()) < 1e-6);

  auto q_perm = f.cross_attend({permute_positions(zq, perm), ViewId::ego},
                               {zkv, ViewId::third});
  auto base_perm = permute_positions(D({3, 2, 3}, base.data()), perm);
  REQUIRE(max_abs_diff(q_perm.data(), base_perm.data()) < 1e-6);
}

TEST_CASE("fusion output matches the scalar equation reference", "[fusion][oracle]") {
  int checked = 0;
  for (uint64_t seed = 0; seed < 3; ++seed) {
    for (int hw : {2, 3}) {
      for (int c : {2, 4}) {
        Rng rng(seed, 13);
        Fusion<double> f(FusionMode::bidirectional, c, rng);
        D z1 = D::rand_uniform({c, hw, hw}, rng, -1.5, 1.5);
        D z2 = D::rand_uniform({c, hw, hw}, rng, -1.5, 1.5);
        auto out = f.fuse({z1, ViewId::ego}, {z2, ViewId::third});
        auto ref = refimpl::fuse_bidirectional(
            z1.data(), z2.data(), c, hw * hw,
            testsup::extract_proj(f.projection(ViewId::ego)),
            testsup::extract_proj(f.projection(ViewId::third)),
            testsup::extract_branch(f.branch(ViewId::ego)),
            testsup::extract_branch(f.branch(ViewId::third)));
        REQUIRE(max_abs_diff(out.data(), ref) < 1e-5);
        ++checked;
      }
    }
  }
  REQUIRE(checked == 12);
}

TEST_CASE("additive fusion adds and commutes", "[fusion][modes]") {
  Rng rng(108, 0);
  Fusion<double> f(FusionMode::additive, 3, rng);
  D z = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  auto zero = f.fuse({z, ViewId::ego}, {scalar_mul(z, -1.0), ViewId::third});
  for (double v : zero.data()) REQUIRE(v == 0.0);

  D a = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  D b = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  auto ab = f.fuse({a, ViewId::ego}, {b, ViewId::third});
  auto ba = f.fuse({b, ViewId::ego}, {a, ViewId::third});
  REQUIRE(ab.data() == ba.data());
}

TEST_CASE("unidirectional modes pass the other view through", "[fusion][modes]") {
  Rng rng(109, 0);
  Fusion<double> f12(FusionMode::a12_only, 3, rng);
  D z1 = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  D z2 = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  auto out12 = f12.fuse({z1, ViewId::ego}, {z2, ViewId::third});
  auto manual12 = add(f12.cross_attend({z1, ViewId::ego}, {z2, ViewId::third}), z2);
  REQUIRE(out12.data() == manual12.data());

  Rng rng2(109, 0);
  Fusion<double> f21(FusionMode::a21_only, 3, rng2);
  auto out21 = f21.fuse({z1, ViewId::ego}, {z2, ViewId::third});
  auto manual21 = add(z1, f21.cross_attend({z2, ViewId::third}, {z1, ViewId::ego}));
  REQUIRE(out21.data() == manual21.data());
}

TEST_CASE("mirrored parameters make bidirectional fusion symmetric",
          "[fusion][modes]") {
  Rng rng(110, 0);
  Fusion<double> f(FusionMode::bidirectional, 3, rng);
  f.projection(ViewId::third) = f.projection(ViewId::ego);
  f.branch(ViewId::third) = f.branch(ViewId::ego);
  D z = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0);
  auto fused = f.fuse({z, ViewId::ego}, {z, ViewId::third});
  auto once = f.cross_attend({z, ViewId::ego}, {z, ViewId::third});
  REQUIRE(max_abs_diff(fused.data(), scalar_mul(once, 2.0).data()) < 1e-12);
}

TEST_CASE("finite differences confirm fusion gradients end to end",
          "[fusion][gradcheck]") {
  Rng rng(111, 0);
  auto fusion = std::make_shared<Fusion<double>>(FusionMode::bidirectional, 2, rng);
  D z1 = D::rand_uniform({2, 2, 2}, rng, -1.0, 1.0);
  D z2 = D::rand_uniform({2, 2, 2}, rng, -1.0, 1.0);
  std::vector<D> leaves{z1, z2};
  std::vector<D*> params;
  fusion->collect_params(params);
  for (auto* p : params) leaves.push_back(*p);

  auto fn = [fusion, z1, z2](std::vector<D>&) {
    return sum(fusion->fuse({z1, ViewId::ego}, {z2, ViewId::third}));
  };
  auto res = mvrl::grad_check<double>(fn, leaves);
  INFO(res.worst);
  REQUIRE(res.ok(1e-4));
}

TEST_CASE("every fusion parameter receives gradient", "[fusion][gradcheck]") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed, 14);
    Fusion<double> f(FusionMode::bidirectional, 3, rng);
    D z1 = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0, true);
    D z2 = D::rand_uniform({3, 2, 2}, rng, -1.0, 1.0, true);
    sum(mul(f.fuse({z1, ViewId::ego}, {z2, ViewId::third}),
            D::rand_uniform({3, 2, 2}, rng, 0.5, 1.5)))
        .backward();
    std::vector<D*> params;
    f.collect_params(params);
    REQUIRE(params.size() == 28);
    for (auto* p : params) {
      REQUIRE(p->has_grad());
      double mag = 0;
      for (double g : p->grad()) mag += std::fabs(g);
      REQUIRE(mag > 0.0);
    }
    REQUIRE(z1.has_grad());
    REQUIRE(z2.has_grad());
  }
}

TEST_CASE("attention maps are normalized heatmaps of the weight columns",
          "[fusion][heatmap]") {
  Rng rng(112, 0);
  Fusion<double> f(FusionMode::bidirectional, 4, rng);
  D z1 = D::rand_uniform({4, 3, 3}, rng, -1.0, 1.0);
  D z2 = D::rand_uniform({4, 3, 3}, rng, -1.0, 1.0);

  for (auto dir : {AttentionDirection::a12, AttentionDirection::a21}) {
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 3; ++w) {
        auto m = f.attention_map({z1, ViewId::ego}, {z2, ViewId::third}, h, w, dir);
        REQUIRE(m.shape() == Shape{3, 3});
        double s = 0;
        for (double v : m.data()) {
          REQUIRE(v >= 0.0);
          s += v;
        }
        REQUIRE(std::fabs(s - 1.0) < 1e-6);
      }
  }

  // The map is exactly one column of the full attention matrix.
  const auto& pe = f.projection(ViewId::ego);
  const auto& pt = f.projection(ViewId::third);
  auto q = conv1x1(layer_norm(z1, pe.ln_gain, pe.ln_bias), pe.qw, pe.qb);
  auto k = conv1x1(layer_norm(z2, pt.ln_gain, pt.ln_bias), pt.kw, pt.kb);
  auto a = mvrl::attention_weights(reshape(q, {4, 9}), reshape(k, {4, 9}));
  auto m = f.attention_map({z1, ViewId::ego}, {z2, ViewId::third}, 1, 2, AttentionDirection::a12);
  const int nq = 1 * 3 + 2;
  for (int i = 0; i < 9; ++i)
    REQUIRE(std::fabs(m.data()[i] - a.data()[i * 9 + nq]) < 1e-12);
}

TEST_CASE("degenerate projections give uniform attention maps", "[fusion][heatmap]") {
  Rng rng(113, 0);
  Fusion<double> f(FusionMode::bidirectional, 4, rng);
  f.projection(ViewId::ego).qw = D::zeros({4, 4});
  f.projection(ViewId::ego).qb = D::zeros({4});
  D z1 = D::rand_uniform({4, 3, 3}, rng, -1.0, 1.0);
  D z2 = D::rand_uniform({4, 3, 3}, rng, -1.0, 1.0);
  auto m = f.attention_map({z1, ViewId::ego}, {z2, ViewId::third}, 0, 0,
                           AttentionDirection::a12);
  for (double v : m.data()) REQUIRE(std::fabs(v - 1.0 / 9.0) < 1e-12);
}

TEST_CASE("fusion rejects misuse", "[fusion][errors]") {
  Rng rng(114, 0);
  Fusion<double> add_only(FusionMode::additive, 3, rng);
  D z = D::zeros({3, 2, 2});
  REQUIRE_THROWS_AS(add_only.cross_attend({z, ViewId::ego}, {z, ViewId::third}),
                    mvrl::ModeError);
  REQUIRE_THROWS_AS(add_only.attention_map({z, ViewId::ego}, {z, ViewId::third},
                                           0, 0, AttentionDirection::a12),
                    mvrl::ModeError);

  Fusion<double> f(FusionMode::bidirectional, 3, rng);
  REQUIRE_THROWS_AS(f.fuse({z, ViewId::third}, {z, ViewId::ego}),
                    mvrl::ContractError);
  REQUIRE_THROWS_AS(f.cross_attend({z, ViewId::ego}, {z, ViewId::ego}),
                    mvrl::ContractError);
  REQUIRE_THROWS_AS(f.fuse({z, ViewId::ego}, {D::zeros({3, 2, 3}), ViewId::third}),
                    mvrl::ShapeError);
  REQUIRE_THROWS_AS(f.attention_map({z, ViewId::ego}, {z, ViewId::third}, 5, 0,
                                    AttentionDirection::a12),
                    mvrl::RangeError);
  REQUIRE_THROWS_AS(f.cross_attend({D::zeros({4, 2, 2}), ViewId::ego},
                                   {D::zeros({4, 2, 2}), ViewId::third}),
                    mvrl::ShapeError);
}

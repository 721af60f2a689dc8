#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mvrl/encoder.hpp"
#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

enum class FusionMode { bidirectional, a12_only, a21_only, additive };

inline const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::bidirectional: return "bidirectional";
    case FusionMode::a12_only: return "a12_only";
    case FusionMode::a21_only: return "a21_only";
    case FusionMode::additive: return "additive";
  }
  return "?";
}

inline FusionMode fusion_mode_from_name(const std::string& s) {
  if (s == "bidirectional") return FusionMode::bidirectional;
  if (s == "a12_only") return FusionMode::a12_only;
  if (s == "a21_only") return FusionMode::a21_only;
  if (s == "additive") return FusionMode::additive;
  throw ConfigError("unknown fusion mode: " + s);
}

// a12: queries from the egocentric map, keys/values from the third-person
// map. a21 is the reverse.
enum class AttentionDirection { a12, a21 };

// Per-view pre-norm and Q/K/V 1x1 projections (all C' -> C').
template <typename T>
struct ViewProjection {
  Tensor<T> ln_gain, ln_bias;
  Tensor<T> qw, qb, kw, kb, vw, vb;

  ViewProjection() = default;
  ViewProjection(int c, Rng& rng)
      : ln_gain(Tensor<T>::full({c}, T(1), true)),
        ln_bias(Tensor<T>::zeros({c}, true)),
        qw(init_linear_weight<T>(c, c, rng, T(1))),
        qb(Tensor<T>::zeros({c}, true)),
        kw(init_linear_weight<T>(c, c, rng, T(1))),
        kb(Tensor<T>::zeros({c}, true)),
        vw(init_linear_weight<T>(c, c, rng, T(1))),
        vb(Tensor<T>::zeros({c}, true)) {}

  void collect_params(std::vector<Tensor<T>*>& out) {
    for (auto* t : {&ln_gain, &ln_bias, &qw, &qb, &kw, &kb, &vw, &vb})
      out.push_back(t);
  }
};

// Per-branch post-residual norm and position-wise two-layer MLP (hidden 2C').
template <typename T>
struct FusionBranch {
  Tensor<T> post_ln_gain, post_ln_bias;
  Tensor<T> g1w, g1b, g2w, g2b;

  FusionBranch() = default;
  FusionBranch(int c, Rng& rng)
      : post_ln_gain(Tensor<T>::full({c}, T(1), true)),
        post_ln_bias(Tensor<T>::zeros({c}, true)),
        g1w(init_linear_weight<T>(2 * c, c, rng, T(std::sqrt(2.0)))),
        g1b(Tensor<T>::zeros({2 * c}, true)),
        g2w(init_linear_weight<T>(c, 2 * c, rng, T(1))),
        g2b(Tensor<T>::zeros({c}, true)) {}

  void collect_params(std::vector<Tensor<T>*>& out) {
    for (auto* t : {&post_ln_gain, &post_ln_bias, &g1w, &g1b, &g2w, &g2b})
      out.push_back(t);
  }
};

template <typename T>
struct QkvMaps {
  Tensor<T> q, k, v;  // each [C',H',W'] (or batched)
};

// Q/K/V embeddings of one view's feature map: 1x1 projections of the
// pre-normalized map. Position-wise by construction.
template <typename T>
QkvMaps<T> qkv_embed(const Tensor<T>& z, const ViewProjection<T>& proj) {
  auto n = layer_norm(z, proj.ln_gain, proj.ln_bias);
  return {conv1x1(n, proj.qw, proj.qb), conv1x1(n, proj.kw, proj.kb),
          conv1x1(n, proj.vw, proj.vb)};
}

// Scaled dot-product attention weights between flattened maps:
// A = softmax_over_keys(K^T Q / sqrt(C')), shape [N_kv, N_q]; every column is
// a probability distribution over key positions.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(0) != k.dim(0))
    throw ShapeError("attention_weights: expects [C,N_q] and [C,N_kv] with "
                     "matching C");
  const T scale = T(1) / std::sqrt(static_cast<T>(q.dim(0)));
  auto logits = scalar_mul(matmul(transpose_last2(k), q), scale);
  return softmax(logits, 0);
}

// Cross-view attention with fused residual and per-branch MLP. The query
// view's map is looked up against the other view's keys/values and the
// result is g(LN(Z_q + V_kv * A)).
template <typename T>
class Fusion {
 public:
  Fusion() = default;

  Fusion(FusionMode mode, int c, Rng& rng) : mode_(mode), c_(c) {
    if (c < 1) throw ConfigError("fusion: channel count must be positive");
    if (mode != FusionMode::additive) {
      proj_.emplace_back(c, rng);    // ego
      proj_.emplace_back(c, rng);    // third
      branch_.emplace_back(c, rng);  // queries from ego
      branch_.emplace_back(c, rng);  // queries from third
    }
  }

  FusionMode mode() const { return mode_; }
  int channels() const { return c_; }

  const ViewProjection<T>& projection(ViewId v) const {
    require_attention_();
    return proj_[v == ViewId::ego ? 0 : 1];
  }
  ViewProjection<T>& projection(ViewId v) {
    require_attention_();
    return proj_[v == ViewId::ego ? 0 : 1];
  }
  const FusionBranch<T>& branch(ViewId query_view) const {
    require_attention_();
    return branch_[query_view == ViewId::ego ? 0 : 1];
  }
  FusionBranch<T>& branch(ViewId query_view) {
    require_attention_();
    return branch_[query_view == ViewId::ego ? 0 : 1];
  }

  Tensor<T> cross_attend(const FeatureMap<T>& zq, const FeatureMap<T>& zkv) const {
    require_attention_();
    if (zq.view == zkv.view)
      throw ContractError("cross_attend: query and key/value views must differ");
    check_map_(zq.values);
    check_map_(zkv.values);
    if (zq.values.shape() != zkv.values.shape())
      throw ShapeError("cross_attend: view shapes differ: " +
                       shape_str(zq.values.shape()) + " vs " +
                       shape_str(zkv.values.shape()));
    const bool batched = zq.values.rank() == 4;
    auto z1 = lift4_(zq.values);
    auto z2 = lift4_(zkv.values);
    const int n = z1.dim(0), c = z1.dim(1), h = z1.dim(2), w = z1.dim(3);
    const int p = h * w;

    auto q = conv1x1(pre_norm_(z1, zq.view), projection(zq.view).qw,
                     projection(zq.view).qb);
    auto kv_normed = pre_norm_(z2, zkv.view);
    auto k = conv1x1(kv_normed, projection(zkv.view).kw, projection(zkv.view).kb);
    auto v = conv1x1(kv_normed, projection(zkv.view).vw, projection(zkv.view).vb);

    auto q3 = reshape(q, {n, c, p});
    auto k3 = reshape(k, {n, c, p});
    auto v3 = reshape(v, {n, c, p});
    const T scale = T(1) / std::sqrt(static_cast<T>(c));
    auto att = softmax(scalar_mul(bmm(transpose_last2(k3), q3), scale), 1);
    auto looked_up = reshape(bmm(v3, att), {n, c, h, w});

    const auto& br = branch(zq.view);
    auto normed = layer_norm(add(z1, looked_up), br.post_ln_gain, br.post_ln_bias);
    auto out = conv1x1(relu(conv1x1(normed, br.g1w, br.g1b)), br.g2w, br.g2b);
    return batched ? out : reshape(out, {c, h, w});
  }

  // Joint embedding of the two views under the configured mode. In the
  // unidirectional modes the non-attended view passes through unchanged so
  // both views still reach the policy.
  Tensor<T> fuse(const FeatureMap<T>& z_ego, const FeatureMap<T>& z_third) const {
    if (z_ego.view != ViewId::ego || z_third.view != ViewId::third)
      throw ContractError("fuse: arguments must be (ego, third) feature maps");
    if (z_ego.values.shape() != z_third.values.shape())
      throw ShapeError("fuse: view shapes differ: " +
                       shape_str(z_ego.values.shape()) + " vs " +
                       shape_str(z_third.values.shape()));
    switch (mode_) {
      case FusionMode::bidirectional:
        return add(cross_attend(z_ego, z_third), cross_attend(z_third, z_ego));
      case FusionMode::a12_only:
        return add(cross_attend(z_ego, z_third), z_third.values);
      case FusionMode::a21_only:
        return add(z_ego.values, cross_attend(z_third, z_ego));
      case FusionMode::additive:
        return add(z_ego.values, z_third.values);
    }
    throw ContractError("fuse: bad mode");
  }

  // Attention heatmap for one query position, as an [H',W'] map summing to 1.
  // Evaluation-only (no gradients recorded).
  Tensor<T> attention_map(const FeatureMap<T>& z_ego, const FeatureMap<T>& z_third,
                          int query_h, int query_w,
                          AttentionDirection dir) const {
    require_attention_();
    if (z_ego.values.rank() != 3 || z_third.values.rank() != 3)
      throw ShapeError("attention_map: expects single [C,H,W] maps");
    check_map_(z_ego.values);
    check_map_(z_third.values);
    const int h = z_ego.values.dim(1), w = z_ego.values.dim(2);
    if (query_h < 0 || query_h >= h || query_w < 0 || query_w >= w)
      throw RangeError("attention_map: query position out of bounds");

    NoGradGuard ng;
    const FeatureMap<T>& zq = dir == AttentionDirection::a12 ? z_ego : z_third;
    const FeatureMap<T>& zkv = dir == AttentionDirection::a12 ? z_third : z_ego;
    auto q = conv1x1(pre_norm_(zq.values, zq.view), projection(zq.view).qw,
                     projection(zq.view).qb);
    auto kv_normed = pre_norm_(zkv.values, zkv.view);
    auto k = conv1x1(kv_normed, projection(zkv.view).kw, projection(zkv.view).kb);
    auto a = attention_weights(reshape(q, {c_, h * w}), reshape(k, {c_, h * w}));
    const int nq = query_h * w + query_w;
    std::vector<T> col(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h * w; ++i)
      col[i] = a.data()[static_cast<std::size_t>(i) * h * w + nq];
    return Tensor<T>({h, w}, std::move(col));
  }

  void collect_params(std::vector<Tensor<T>*>& out) {
    for (auto& p : proj_) p.collect_params(out);
    for (auto& b : branch_) b.collect_params(out);
  }

 private:
  void require_attention_() const {
    if (mode_ == FusionMode::additive || proj_.empty())
      throw ModeError("operation requires an attention-bearing fusion mode");
  }

  void check_map_(const Tensor<T>& z) const {
    const bool batched = z.rank() == 4;
    if (z.rank() != 3 && !batched)
      throw ShapeError("fusion: feature map must be [C,H,W] or [N,C,H,W]");
    if (z.dim(batched ? 1 : 0) != c_)
      throw ShapeError("fusion: feature map channels " +
                       std::to_string(z.dim(batched ? 1 : 0)) +
                       " do not match configured " + std::to_string(c_));
  }

  static Tensor<T> lift4_(const Tensor<T>& z) {
    return z.rank() == 4 ? z : reshape(z, {1, z.dim(0), z.dim(1), z.dim(2)});
  }

  Tensor<T> pre_norm_(const Tensor<T>& z, ViewId view) const {
    const auto& p = projection(view);
    return layer_norm(z, p.ln_gain, p.ln_bias);
  }

  FusionMode mode_ = FusionMode::bidirectional;
  int c_ = 0;
  std::vector<ViewProjection<T>> proj_;
  std::vector<FusionBranch<T>> branch_;
};

}  // namespace mvrl

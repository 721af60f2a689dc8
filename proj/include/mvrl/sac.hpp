#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mvrl/augment.hpp"
#include "mvrl/encoder.hpp"
#include "mvrl/errors.hpp"
#include "mvrl/fusion.hpp"
#include "mvrl/optim.hpp"
#include "mvrl/replay.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/sim.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

enum class ViewMode { both, ego_only, third_only };

inline const char* view_mode_name(ViewMode m) {
  switch (m) {
    case ViewMode::both: return "both";
    case ViewMode::ego_only: return "ego-only";
    default: return "third-only";
  }
}

inline ViewMode view_mode_from_name(const std::string& s) {
  if (s == "both") return ViewMode::both;
  if (s == "ego-only") return ViewMode::ego_only;
  if (s == "third-only") return ViewMode::third_only;
  throw ConfigError("unknown view mode: " + s);
}

struct SacConfig {
  double gamma = 0.99;
  double rho = 0.01;  // Polyak coefficient (temperature already claims tau)
  int batch_size = 128;
  double lr = 1e-3;
  double init_temperature = 0.1;
  double target_entropy = -2.0;
  int buffer_capacity = 100000;
  int warmup = 1000;
  int updates_per_step = 1;
  int update_every = 1;  // run updates only every k-th environment step
  int hidden = 256;
  double log_std_min = -10.0;
  double log_std_max = 2.0;
  int action_dim = 2;
  bool augment = true;
  AugmentConfig augment_cfg{};

  void validate() const {
    std::string bad;
    if (!(gamma >= 0.0 && gamma < 1.0)) bad += " gamma";
    if (!(rho > 0.0 && rho <= 1.0)) bad += " rho";
    if (batch_size <= 0) bad += " batch_size";
    if (lr <= 0.0) bad += " lr";
    if (init_temperature <= 0.0) bad += " init_temperature";
    if (buffer_capacity <= 0) bad += " buffer_capacity";
    if (warmup < 0) bad += " warmup";
    if (updates_per_step < 0) bad += " updates_per_step";
    if (update_every <= 0) bad += " update_every";
    if (hidden <= 0) bad += " hidden";
    if (log_std_min > log_std_max) bad += " log_std_range";
    if (action_dim <= 0) bad += " action_dim";
    if (!bad.empty()) throw ConfigError("invalid SAC config:" + bad);
  }
};

struct UpdateMetrics {
  bool updated = false;
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double temperature_loss = 0.0;
  double temperature = 0.0;
  double mean_q = 0.0;
  double mean_log_pi = 0.0;
};

template <typename T>
struct Dense {
  Tensor<T> w, b;

  Dense() = default;
  Dense(int in, int out, T gain, Rng& rng)
      : w(init_linear_weight<T>(out, in, rng, gain)),
        b(Tensor<T>({out}, std::vector<T>(static_cast<std::size_t>(out), T(0)),
                    true)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }

  void collect_params(std::vector<Tensor<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Q(s,a): 2-layer MLP over [features, action].
template <typename T>
struct CriticHead {
  Dense<T> l1, l2;

  CriticHead() = default;
  CriticHead(int feat_dim, int action_dim, int hidden, Rng& rng)
      : l1(feat_dim + action_dim, hidden, T(std::sqrt(2.0)), rng),
        l2(hidden, 1, T(1), rng) {}

  Tensor<T> operator()(const Tensor<T>& feat, const Tensor<T>& action) const {
    return l2(relu(l1(concat(feat, action, 1))));
  }

  void collect_params(std::vector<Tensor<T>*>& out) {
    l1.collect_params(out);
    l2.collect_params(out);
  }
};

// π(s): shared trunk with mean and log-std output layers.
template <typename T>
struct ActorHead {
  Dense<T> trunk, mean_layer, log_std_layer;

  ActorHead() = default;
  ActorHead(int feat_dim, int action_dim, int hidden, Rng& rng)
      : trunk(feat_dim, hidden, T(std::sqrt(2.0)), rng),
        mean_layer(hidden, action_dim, T(1), rng),
        log_std_layer(hidden, action_dim, T(1), rng) {}

  void collect_params(std::vector<Tensor<T>*>& out) {
    trunk.collect_params(out);
    mean_layer.collect_params(out);
    log_std_layer.collect_params(out);
  }
};

template <typename T>
struct ActorSample {
  Tensor<T> action;   // [N, d], tanh-squashed
  Tensor<T> log_pi;   // [N, 1]
};

// Minibatch prepared for the three SAC losses. `feat` carries the gradient
// path into encoders and fusion; everything else is constant or detached.
template <typename T>
struct Batch {
  int n = 0;
  Tensor<T> feat;              // [N, F], gradient path
  Tensor<T> feat_detached;     // [N, F]
  Tensor<T> action;            // [N, d]
  Tensor<T> reward;            // [N, 1]
  Tensor<T> done;              // [N, 1]
  Tensor<T> next_feat_actor;   // [N, F], online encoders, no grad
  Tensor<T> next_feat_target;  // [N, F], target encoders, no grad
};

template <typename T>
class SacAgent {
 public:
  SacAgent(const EncoderConfig& enc_cfg, ViewMode view, FusionMode fusion_mode,
           const SacConfig& cfg, std::uint64_t seed)
      : enc_cfg_(enc_cfg), view_(view), fusion_mode_(fusion_mode), cfg_(cfg),
        rng_(seed, 17) {
    cfg_.validate();
    enc_cfg_.validate();
    const int feat_dim = static_cast<int>(enc_cfg_.feature_size());

    Rng r_ego(seed, 1), r_third(seed, 2), r_fuse(seed, 3);
    Rng r_q1(seed, 4), r_q2(seed, 5), r_actor(seed, 6);
    Rng r_tgt(seed, 7);

    if (uses_ego_()) {
      enc_ego_ = Encoder<T>(enc_cfg_, r_ego);
      tgt_enc_ego_ = Encoder<T>(enc_cfg_, r_tgt);
    }
    if (uses_third_()) {
      enc_third_ = Encoder<T>(enc_cfg_, r_third);
      tgt_enc_third_ = Encoder<T>(enc_cfg_, r_tgt);
    }
    if (view_ == ViewMode::both) {
      fusion_ = Fusion<T>(fusion_mode_, enc_cfg_.out_channels(), r_fuse);
      tgt_fusion_ = Fusion<T>(fusion_mode_, enc_cfg_.out_channels(), r_tgt);
    }
    q1_ = CriticHead<T>(feat_dim, cfg_.action_dim, cfg_.hidden, r_q1);
    q2_ = CriticHead<T>(feat_dim, cfg_.action_dim, cfg_.hidden, r_q2);
    tq1_ = CriticHead<T>(feat_dim, cfg_.action_dim, cfg_.hidden, r_tgt);
    tq2_ = CriticHead<T>(feat_dim, cfg_.action_dim, cfg_.hidden, r_tgt);
    actor_ = ActorHead<T>(feat_dim, cfg_.action_dim, cfg_.hidden, r_actor);
    log_tau_ = Tensor<T>({1}, {T(std::log(cfg_.init_temperature))}, true);

    sync_targets_hard_();
    critic_opt_ = Adam<T>(critic_params(), cfg_.lr);
    actor_opt_ = Adam<T>(actor_params(), cfg_.lr);
    temp_opt_ = Adam<T>({log_tau_}, cfg_.lr);
  }

  const SacConfig& config() const { return cfg_; }
  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  ViewMode view_mode() const { return view_; }
  FusionMode fusion_mode() const { return fusion_mode_; }
  int feature_size() const {
    return static_cast<int>(enc_cfg_.feature_size());
  }
  Rng& rng() { return rng_; }

  Encoder<T>& encoder(ViewId v) {
    return v == ViewId::ego ? enc_ego_ : enc_third_;
  }
  Fusion<T>& fusion() {
    if (!fusion_) throw ModeError("no fusion in a single-view agent");
    return *fusion_;
  }
  ActorHead<T>& actor() { return actor_; }
  CriticHead<T>& critic(int i) { return i == 0 ? q1_ : q2_; }
  CriticHead<T>& target_critic(int i) { return i == 0 ? tq1_ : tq2_; }
  Tensor<T>& log_temperature() { return log_tau_; }
  double temperature() const { return std::exp(double(log_tau_.item())); }

  Adam<T>& critic_opt() { return critic_opt_; }
  Adam<T>& actor_opt() { return actor_opt_; }
  Adam<T>& temperature_opt() { return temp_opt_; }

  // --- parameter groups -----------------------------------------------

  std::vector<Tensor<T>> representation_params() {
    std::vector<Tensor<T>*> ptrs;
    if (uses_ego_()) enc_ego_.collect_params(ptrs);
    if (uses_third_()) enc_third_.collect_params(ptrs);
    if (fusion_) fusion_->collect_params(ptrs);
    return deref_(ptrs);
  }

  std::vector<Tensor<T>> critic_head_params() {
    std::vector<Tensor<T>*> ptrs;
    q1_.collect_params(ptrs);
    q2_.collect_params(ptrs);
    return deref_(ptrs);
  }

  std::vector<Tensor<T>> critic_params() {
    auto out = representation_params();
    for (auto& p : critic_head_params()) out.push_back(p);
    return out;
  }

  std::vector<Tensor<T>> actor_params() {
    std::vector<Tensor<T>*> ptrs;
    actor_.collect_params(ptrs);
    return deref_(ptrs);
  }

  // Mirrors critic_params() element for element (Polyak pairing).
  std::vector<Tensor<T>> target_params() {
    std::vector<Tensor<T>*> ptrs;
    if (uses_ego_()) tgt_enc_ego_.collect_params(ptrs);
    if (uses_third_()) tgt_enc_third_.collect_params(ptrs);
    if (tgt_fusion_) tgt_fusion_->collect_params(ptrs);
    tq1_.collect_params(ptrs);
    tq2_.collect_params(ptrs);
    return deref_(ptrs);
  }

  std::vector<Tensor<T>> all_params() {
    auto out = critic_params();
    for (auto& p : actor_params()) out.push_back(p);
    out.push_back(log_tau_);
    for (auto& p : target_params()) out.push_back(p);
    return out;
  }

  void zero_grad_all() {
    for (auto& p : critic_params()) p.zero_grad();
    for (auto& p : actor_params()) p.zero_grad();
    log_tau_.zero_grad();
  }

  // --- representation ---------------------------------------------------

  // Augmentation draw order (independent per sample, per view): current ego,
  // current third, next ego, next third. Changing it changes replayed runs.
  Tensor<T> represent_batch(const std::vector<const ObservationPair*>& obs,
                            bool augmented, Rng& rng) const {
    std::vector<Tensor<T>> egos, thirds;
    egos.reserve(obs.size());
    thirds.reserve(obs.size());
    for (const ObservationPair* o : obs) {
      Tensor<T> e = to_tensor<T>(o->ego);
      Tensor<T> t = to_tensor<T>(o->third);
      if (augmented) {
        auto pair = augment_pair(e, t, rng, cfg_.augment_cfg);
        e = pair.first;
        t = pair.second;
      }
      egos.push_back(std::move(e));
      thirds.push_back(std::move(t));
    }
    return represent_from_tensors_(stack_(egos), stack_(thirds));
  }

  Tensor<T> represent(const ObservationPair& obs, bool augmented,
                      Rng& rng) const {
    return represent_batch({&obs}, augmented, rng);
  }

  // --- policy -------------------------------------------------------------

  // Reparameterized squashed-Gaussian sample; eps is [N, d] standard normal.
  ActorSample<T> sample_action_from_feat(const Tensor<T>& feat,
                                         const Tensor<T>& eps) const {
    const auto h = relu(actor_.trunk(feat));
    const auto mu = actor_.mean_layer(h);
    const auto log_std = clamp(actor_.log_std_layer(h), T(cfg_.log_std_min),
                               T(cfg_.log_std_max));
    const auto u = add(mu, mul(exp(log_std), eps));
    const auto a = tanh(u);

    // log N(u; mu, std) - sum_d log(1 - tanh²(u)), with the squash term
    // rewritten as 2(log2 - u - softplus(-2u)) for numerical stability.
    const T log2pi = T(std::log(2.0 * 3.14159265358979323846));
    const T log2 = T(std::log(2.0));
    auto terms = scalar_mul(mul(eps, eps), T(-0.5));
    terms = sub(terms, log_std);
    terms = scalar_add(terms, T(-0.5) * log2pi - T(2) * log2);
    terms = add(terms, scalar_mul(u, T(2)));
    terms = add(terms, scalar_mul(softplus(scalar_mul(u, T(-2))), T(2)));
    const auto ones = Tensor<T>::full({cfg_.action_dim, 1}, T(1));
    return {a, matmul(terms, ones)};
  }

  Tensor<T> deterministic_action_from_feat(const Tensor<T>& feat) const {
    return tanh(actor_.mean_layer(relu(actor_.trunk(feat))));
  }

  std::vector<double> act(const ObservationPair& obs, bool deterministic) {
    NoGradGuard guard;
    const auto feat = represent(obs, false, rng_);
    Tensor<T> a;
    if (deterministic) {
      a = deterministic_action_from_feat(feat);
    } else {
      std::vector<T> ev(static_cast<std::size_t>(cfg_.action_dim));
      for (auto& e : ev) e = static_cast<T>(rng_.normal());
      a = sample_action_from_feat(feat, Tensor<T>({1, cfg_.action_dim}, ev))
              .action;
    }
    std::vector<double> out(static_cast<std::size_t>(cfg_.action_dim));
    for (int i = 0; i < cfg_.action_dim; ++i)
      out[static_cast<std::size_t>(i)] = double(a.at({0, i}));
    return out;
  }

  // --- losses -------------------------------------------------------------

  Batch<T> prepare_batch(const ReplayBuffer& buffer,
                         const std::vector<int>& idx, Rng& rng) const {
    Batch<T> b;
    b.n = static_cast<int>(idx.size());
    std::vector<const ObservationPair*> obs, next_obs;
    std::vector<T> act_v, rew_v, done_v;
    obs.reserve(idx.size());
    next_obs.reserve(idx.size());
    for (int i : idx) {
      const Transition& t = buffer.at(i);
      if (static_cast<int>(t.action.size()) != cfg_.action_dim)
        throw ShapeError("transition action dimension mismatch");
      obs.push_back(&t.obs);
      next_obs.push_back(&t.next_obs);
      for (double a : t.action) act_v.push_back(T(a));
      rew_v.push_back(T(t.reward));
      done_v.push_back(T(t.done ? 1 : 0));
    }
    b.feat = represent_batch(obs, cfg_.augment, rng);
    b.feat_detached = detach(b.feat);
    {
      NoGradGuard guard;
      b.next_feat_actor = represent_batch(next_obs, cfg_.augment, rng);
      b.next_feat_target =
          represent_target_batch_(next_obs, cfg_.augment, rng);
    }
    b.action = Tensor<T>({b.n, cfg_.action_dim}, std::move(act_v));
    b.reward = Tensor<T>({b.n, 1}, std::move(rew_v));
    b.done = Tensor<T>({b.n, 1}, std::move(done_v));
    return b;
  }

  // Soft Bellman residual: y = r + γ(1-done)(min twin target Q - τ·logπ),
  // loss = MSE(q1, y) + MSE(q2, y). The target carries no gradient.
  Tensor<T> critic_loss(const Batch<T>& b, Rng& rng) const {
    Tensor<T> y;
    {
      NoGradGuard guard;
      std::vector<T> ev(static_cast<std::size_t>(b.n) * cfg_.action_dim);
      for (auto& e : ev) e = static_cast<T>(rng.normal());
      const auto next = sample_action_from_feat(
          b.next_feat_actor, Tensor<T>({b.n, cfg_.action_dim}, ev));
      const auto tq = min2(tq1_(b.next_feat_target, next.action),
                           tq2_(b.next_feat_target, next.action));
      const T tau = T(std::exp(double(log_tau_.item())));
      std::vector<T> yv(static_cast<std::size_t>(b.n));
      for (int i = 0; i < b.n; ++i) {
        const T soft_v = tq.at({i, 0}) - tau * next.log_pi.at({i, 0});
        yv[static_cast<std::size_t>(i)] =
            b.reward.at({i, 0}) +
            T(cfg_.gamma) * (T(1) - b.done.at({i, 0})) * soft_v;
      }
      y = Tensor<T>({b.n, 1}, std::move(yv));
    }
    const auto d1 = sub(q1_(b.feat, b.action), y);
    const auto d2 = sub(q2_(b.feat, b.action), y);
    return add(mean(mul(d1, d1)), mean(mul(d2, d2)));
  }

  // mean(τ·logπ - min twin Q) on detached features: encoders and fusion
  // receive no actor gradient by construction.
  ActorSample<T> actor_loss(const Batch<T>& b, Rng& rng,
                            Tensor<T>* loss_out) const {
    std::vector<T> ev(static_cast<std::size_t>(b.n) * cfg_.action_dim);
    for (auto& e : ev) e = static_cast<T>(rng.normal());
    const auto s = sample_action_from_feat(
        b.feat_detached, Tensor<T>({b.n, cfg_.action_dim}, ev));
    const auto qmin =
        min2(q1_(b.feat_detached, s.action), q2_(b.feat_detached, s.action));
    const T tau = T(std::exp(double(log_tau_.item())));
    *loss_out = mean(sub(scalar_mul(s.log_pi, tau), qmin));
    return s;
  }

  // mean(-log τ · (logπ + target entropy)), logπ gradient-stopped.
  Tensor<T> temperature_loss(const Tensor<T>& log_pi) const {
    const auto lp = detach(log_pi);
    return neg(mul(log_tau_,
                   mean(scalar_add(lp, T(cfg_.target_entropy)))));
  }

  void polyak_step() {
    auto tgt = target_params();
    polyak_update(tgt, critic_params(), cfg_.rho);
  }

  // One SAC step: critic (gradients reach encoders+fusion), actor (heads
  // only), temperature, then Polyak target update.
  UpdateMetrics update(const ReplayBuffer& buffer) {
    UpdateMetrics m;
    if (buffer.size() < cfg_.warmup || buffer.size() < cfg_.batch_size)
      return m;
    const auto idx = buffer.sample_indices(cfg_.batch_size, rng_);
    const Batch<T> b = prepare_batch(buffer, idx, rng_);

    zero_grad_all();
    auto lc = critic_loss(b, rng_);
    lc.backward();
    critic_opt_.step();

    zero_grad_all();
    Tensor<T> la;
    const auto s = actor_loss(b, rng_, &la);
    la.backward();
    actor_opt_.step();

    zero_grad_all();
    auto lt = temperature_loss(s.log_pi);
    lt.backward();
    temp_opt_.step();

    polyak_step();

    m.updated = true;
    m.critic_loss = double(lc.item());
    m.actor_loss = double(la.item());
    m.temperature_loss = double(lt.item());
    m.temperature = temperature();
    double lp = 0;
    for (int i = 0; i < b.n; ++i) lp += double(s.log_pi.at({i, 0}));
    m.mean_log_pi = lp / b.n;
    {
      NoGradGuard guard;
      const auto q = q1_(b.feat_detached, b.action);
      double acc = 0;
      for (int i = 0; i < b.n; ++i) acc += double(q.at({i, 0}));
      m.mean_q = acc / b.n;
    }
    return m;
  }

 private:
  bool uses_ego_() const { return view_ != ViewMode::third_only; }
  bool uses_third_() const { return view_ != ViewMode::ego_only; }

  static std::vector<Tensor<T>> deref_(const std::vector<Tensor<T>*>& ptrs) {
    std::vector<Tensor<T>> out;
    out.reserve(ptrs.size());
    for (Tensor<T>* p : ptrs) out.push_back(*p);
    return out;
  }

  static Tensor<T> stack_(const std::vector<Tensor<T>>& imgs) {
    const int n = static_cast<int>(imgs.size());
    Shape s = imgs.front().shape();
    std::vector<T> v;
    v.reserve(static_cast<std::size_t>(n) * imgs.front().numel());
    for (const auto& img : imgs)
      v.insert(v.end(), img.data().begin(), img.data().end());
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return Tensor<T>(std::move(out), std::move(v));
  }

  Tensor<T> flatten_feat_(const Tensor<T>& maps) const {
    const int n = maps.dim(0);
    return reshape(maps, {n, feature_size()});
  }

  Tensor<T> represent_from_tensors_(const Tensor<T>& ego,
                                    const Tensor<T>& third) const {
    if (view_ == ViewMode::ego_only)
      return flatten_feat_(enc_ego_.encode(ego));
    if (view_ == ViewMode::third_only)
      return flatten_feat_(enc_third_.encode(third));
    const auto ze = enc_ego_.encode_view(ego, ViewId::ego);
    const auto zt = enc_third_.encode_view(third, ViewId::third);
    return flatten_feat_(fusion_->fuse(ze, zt));
  }

  Tensor<T> represent_target_batch_(
      const std::vector<const ObservationPair*>& obs, bool augmented,
      Rng& rng) const {
    std::vector<Tensor<T>> egos, thirds;
    egos.reserve(obs.size());
    thirds.reserve(obs.size());
    for (const ObservationPair* o : obs) {
      Tensor<T> e = to_tensor<T>(o->ego);
      Tensor<T> t = to_tensor<T>(o->third);
      if (augmented) {
        auto pair = augment_pair(e, t, rng, cfg_.augment_cfg);
        e = pair.first;
        t = pair.second;
      }
      egos.push_back(std::move(e));
      thirds.push_back(std::move(t));
    }
    const auto ego_b = stack_(egos), third_b = stack_(thirds);
    if (view_ == ViewMode::ego_only)
      return flatten_feat_(tgt_enc_ego_.encode(ego_b));
    if (view_ == ViewMode::third_only)
      return flatten_feat_(tgt_enc_third_.encode(third_b));
    const auto ze = tgt_enc_ego_.encode_view(ego_b, ViewId::ego);
    const auto zt = tgt_enc_third_.encode_view(third_b, ViewId::third);
    return flatten_feat_(tgt_fusion_->fuse(ze, zt));
  }

  // Hard copy online → target, then freeze the targets: they only move via
  // Polyak averaging afterwards.
  void sync_targets_hard_() {
    auto online = critic_params();
    auto tgt = target_params();
    if (online.size() != tgt.size())
      throw ContractError("target parameter group mismatch");
    for (std::size_t i = 0; i < online.size(); ++i) {
      if (online[i].shape() != tgt[i].shape())
        throw ContractError("target parameter shape mismatch");
      tgt[i].data() = online[i].data();
      tgt[i].set_requires_grad(false);
    }
  }

  EncoderConfig enc_cfg_;
  ViewMode view_;
  FusionMode fusion_mode_;
  SacConfig cfg_;
  Rng rng_;

  Encoder<T> enc_ego_, enc_third_, tgt_enc_ego_, tgt_enc_third_;
  std::optional<Fusion<T>> fusion_, tgt_fusion_;
  CriticHead<T> q1_, q2_, tq1_, tq2_;
  ActorHead<T> actor_;
  Tensor<T> log_tau_;

  Adam<T> critic_opt_, actor_opt_, temp_opt_;
};

}  // namespace mvrl

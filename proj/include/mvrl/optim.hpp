#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

// Adaptive moment estimation over a fixed parameter group. Parameters are
// tensor handles, so the optimizer writes through to the network that owns
// them. A parameter with no accumulated gradient contributes a zero gradient
// (moments still decay), keeping step counts aligned across the group.
template <typename T>
class Adam {
 public:
  Adam() = default;

  Adam(std::vector<Tensor<T>> params, double lr, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  std::size_t size() const { return params_.size(); }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    t_ += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(beta1_, double(t_)));
    const T bc2 = T(1) - static_cast<T>(std::pow(beta2_, double(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      const bool has = p.has_grad();
      const std::vector<T>* g = has ? &p.grad() : nullptr;
      std::vector<T>& m = m_[i];
      std::vector<T>& v = v_[i];
      for (std::size_t k = 0; k < p.numel(); ++k) {
        const T gk = has ? (*g)[k] : T(0);
        m[k] = T(beta1_) * m[k] + (T(1) - T(beta1_)) * gk;
        v[k] = T(beta2_) * v[k] + (T(1) - T(beta2_)) * gk * gk;
        const T mhat = m[k] / bc1;
        const T vhat = v[k] / bc2;
        p.data()[k] -= T(lr_) * mhat / (std::sqrt(vhat) + T(eps_));
      }
    }
  }

  // Checkpoint access: first and second moments plus the step counter.
  std::vector<std::vector<T>>& moments1() { return m_; }
  std::vector<std::vector<T>>& moments2() { return v_; }
  const std::vector<std::vector<T>>& moments1() const { return m_; }
  const std::vector<std::vector<T>>& moments2() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }
  std::vector<Tensor<T>>& params() { return params_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t t_ = 0;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
};

// target <- (1-rho)*target + rho*online, elementwise over matching groups.
template <typename T>
void polyak_update(std::vector<Tensor<T>>& target,
                   const std::vector<Tensor<T>>& online, double rho) {
  if (target.size() != online.size())
    throw ShapeError("polyak_update: group size mismatch");
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].shape() != online[i].shape())
      throw ShapeError("polyak_update: parameter shape mismatch");
    T* t = target[i].data().data();
    const T* o = online[i].data().data();
    for (std::size_t k = 0; k < target[i].numel(); ++k)
      t[k] = (T(1) - T(rho)) * t[k] + T(rho) * o[k];
  }
}

}  // namespace mvrl

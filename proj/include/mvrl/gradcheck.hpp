#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mvrl/tensor.hpp"

namespace mvrl {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "leaf 1 index 3: analytic=... numeric=..."

  bool ok(double tol) const { return checked > 0 && max_rel_err <= tol; }
};

// Central-difference check of d loss / d leaf for every element of every
// leaf. fn must rebuild the graph from the given leaves and return a scalar
// loss. Relative error uses max(|analytic|, |numeric|, floor) as denominator.
// Intended for T = double with h around 1e-5.
template <typename T>
GradCheckResult grad_check(
    const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
    std::vector<Tensor<T>> leaves, T h = T(1e-5), double denom_floor = 1e-6) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  Tensor<T> loss = fn(leaves);
  loss.backward();

  GradCheckResult res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::vector<T> analytic = leaf.grad();
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
      const T saved = leaf.data()[i];
      leaf.data()[i] = saved + h;
      const double fp = static_cast<double>(fn(leaves).item());
      leaf.data()[i] = saved - h;
      const double fm = static_cast<double>(fn(leaves).item());
      leaf.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double denom =
          std::max({std::fabs(a), std::fabs(numeric), denom_floor});
      const double rel = std::fabs(a - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "leaf " + std::to_string(li) + " index " +
                    std::to_string(i) + ": analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace mvrl

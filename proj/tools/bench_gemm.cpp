// Measures raw GEMM and conv2d throughput on this machine so training
// hyperparameters (batch size, updates per step) can be chosen with data.
#include <chrono>
#include <cstdio>
#include <vector>

#include "mvrl/rng.hpp"
#include "mvrl/tensor.hpp"

using Clock = std::chrono::steady_clock;

static double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int main() {
  using mvrl::Tensor;
  mvrl::Rng rng(7, 0);

  {
    const int m = 256, k = 1152, n = 324;
    std::vector<float> a(static_cast<size_t>(m) * k), b(static_cast<size_t>(k) * n),
        c(static_cast<size_t>(m) * n);
    for (auto& v : a) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : b) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const int reps = 40;
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r)
      mvrl::detail::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
    double dt = seconds_since(t0);
    double flops = 2.0 * m * k * n * reps;
    std::printf("gemm_nn   %dx%dx%d: %.2f GFLOP/s\n", m, k, n, flops / dt / 1e9);
  }

  {
    // Forward+backward through a 4-layer conv stack at batch 128, the shape
    // of one critic update on 32x32 two-view inputs.
    const int batch = 128;
    Tensor<float> x = Tensor<float>::rand_uniform({batch, 3, 32, 32}, rng, 0.f, 1.f);
    Tensor<float> w1 = Tensor<float>::rand_normal({32, 3, 3, 3}, rng, 0.f, 0.05f, true);
    Tensor<float> w2 = Tensor<float>::rand_normal({32, 32, 3, 3}, rng, 0.f, 0.05f, true);
    Tensor<float> w3 = Tensor<float>::rand_normal({32, 32, 3, 3}, rng, 0.f, 0.05f, true);
    Tensor<float> w4 = Tensor<float>::rand_normal({32, 32, 3, 3}, rng, 0.f, 0.05f, true);
    Tensor<float> b = Tensor<float>::zeros({32}, true);
    const int reps = 10;
    auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) {
      auto h1 = relu(conv2d(x, w1, b, 2, 1));
      auto h2 = relu(conv2d(h1, w2, b, 2, 1));
      auto h3 = relu(conv2d(h2, w3, b, 1, 0));
      auto h4 = relu(conv2d(h3, w4, b, 1, 1));
      auto loss = mean(h4);
      loss.backward();
    }
    double dt = seconds_since(t0);
    std::printf("conv stack fwd+bwd batch %d: %.1f ms/iter\n", batch,
                dt / reps * 1e3);
  }
  return 0;
}

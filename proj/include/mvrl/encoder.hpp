#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

enum class ViewId { ego, third };

inline const char* view_name(ViewId v) {
  return v == ViewId::ego ? "ego" : "third";
}

// Layer-by-layer description of a view encoder. All lists have one entry per
// conv layer; the final channel count is the feature width C'.
struct EncoderConfig {
  int input_hw = 32;
  int in_channels = 3;
  std::vector<int> channels = {16, 16, 32, 32};
  std::vector<int> kernels = {3, 3, 3, 3};
  std::vector<int> strides = {2, 2, 1, 1};
  std::vector<int> paddings = {1, 1, 0, 1};

  int layer_count() const { return static_cast<int>(channels.size()); }
  int out_channels() const { return channels.back(); }

  void validate() const {
    if (input_hw < 1 || in_channels < 1)
      throw ConfigError("encoder: input size and channels must be positive");
    if (channels.empty())
      throw ConfigError("encoder: at least one conv layer required");
    if (kernels.size() != channels.size() || strides.size() != channels.size() ||
        paddings.size() != channels.size())
      throw ConfigError("encoder: channels/kernels/strides/paddings lists "
                        "must have equal length");
    int hw = input_hw;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (channels[i] < 1 || kernels[i] < 1 || strides[i] < 1 || paddings[i] < 0)
        throw ConfigError("encoder: invalid layer " + std::to_string(i));
      if (kernels[i] > hw + 2 * paddings[i])
        throw ConfigError("encoder: kernel exceeds padded input at layer " +
                          std::to_string(i));
      hw = (hw + 2 * paddings[i] - kernels[i]) / strides[i] + 1;
    }
    if (hw < 2)
      throw ConfigError("encoder: output extent " + std::to_string(hw) +
                        " too small; attention needs >= 2 positions");
  }

  // Spatial extent of the produced feature map, from the conv arithmetic.
  int output_hw() const {
    int hw = input_hw;
    for (std::size_t i = 0; i < channels.size(); ++i)
      hw = (hw + 2 * paddings[i] - kernels[i]) / strides[i] + 1;
    return hw;
  }

  std::size_t feature_size() const {
    return static_cast<std::size_t>(out_channels()) * output_hw() * output_hw();
  }

  static EncoderConfig desk_default() { return EncoderConfig{}; }

  // 84x84, 11 conv layers: the full-scale option.
  static EncoderConfig full_scale() {
    EncoderConfig c;
    c.input_hw = 84;
    c.channels.assign(11, 32);
    c.kernels.assign(11, 3);
    c.strides = {2, 1, 1, 1, 2, 1, 1, 2, 1, 1, 1};
    c.paddings.assign(11, 1);
    return c;
  }
};

namespace detail {

// Semi-orthogonal [rows, cols] matrix scaled by gain: the shorter dimension's
// vectors are orthonormal (modified Gram-Schmidt), so entry variance is
// approximately gain^2 / max(rows, cols).
template <typename T>
std::vector<T> orthogonal_matrix(int rows, int cols, Rng& rng, T gain) {
  const int nvec = std::min(rows, cols);
  const int dim = std::max(rows, cols);
  std::vector<std::vector<T>> basis(nvec);
  for (int i = 0; i < nvec; ++i) {
    std::vector<T> v(dim);
    while (true) {
      for (auto& x : v) x = static_cast<T>(rng.normal());
      for (int j = 0; j < i; ++j) {
        T dot = 0;
        for (int d = 0; d < dim; ++d) dot += v[d] * basis[j][d];
        for (int d = 0; d < dim; ++d) v[d] -= dot * basis[j][d];
      }
      T norm = 0;
      for (T x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > T(1e-6)) {
        for (auto& x : v) x /= norm;
        break;
      }
    }
    basis[i] = std::move(v);
  }
  std::vector<T> m(static_cast<std::size_t>(rows) * cols);
  if (rows <= cols) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        m[static_cast<std::size_t>(i) * cols + j] = gain * basis[i][j];
  } else {
    for (int j = 0; j < cols; ++j)
      for (int i = 0; i < rows; ++i)
        m[static_cast<std::size_t>(i) * cols + j] = gain * basis[j][i];
  }
  return m;
}

}  // namespace detail

// Orthogonal-init weight for a conv layer, zero bias.
template <typename T>
Tensor<T> init_conv_weight(int f, int c, int k, Rng& rng, T gain) {
  auto m = detail::orthogonal_matrix<T>(f, c * k * k, rng, gain);
  return Tensor<T>({f, c, k, k}, std::move(m), true);
}

template <typename T>
Tensor<T> init_linear_weight(int out, int in, Rng& rng, T gain) {
  return Tensor<T>({out, in}, detail::orthogonal_matrix<T>(out, in, rng, gain),
                   true);
}

template <typename T>
struct ConvLayer {
  Tensor<T> w;  // [F, C, k, k]
  Tensor<T> b;  // [F]
};

template <typename T>
struct FeatureMap {
  Tensor<T> values;  // [C',H',W'] or [N,C',H',W']
  ViewId view;
};

// One view's ConvNet: conv + ReLU per layer. The two views of an agent hold
// two independent instances (parameters are never shared).
template <typename T>
class Encoder {
 public:
  Encoder() = default;

  Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
    config.validate();
    int c = config.in_channels;
    for (int i = 0; i < config.layer_count(); ++i) {
      const int f = config.channels[i];
      const int k = config.kernels[i];
      layers_.push_back({init_conv_weight<T>(f, c, k, rng, T(std::sqrt(2.0))),
                         Tensor<T>::zeros({f}, true)});
      c = f;
    }
  }

  const EncoderConfig& config() const { return config_; }
  std::vector<ConvLayer<T>>& layers() { return layers_; }
  const std::vector<ConvLayer<T>>& layers() const { return layers_; }

  // Pure function of (parameters, input). Accepts [C,H,W] or [N,C,H,W].
  Tensor<T> encode(const Tensor<T>& obs) const {
    const bool batched = obs.rank() == 4;
    if (obs.rank() != 3 && !batched)
      throw ShapeError("encode: observation must be [C,H,W] or [N,C,H,W]");
    if (obs.dim(batched ? 1 : 0) != config_.in_channels ||
        obs.dim(batched ? 2 : 1) != config_.input_hw ||
        obs.dim(batched ? 3 : 2) != config_.input_hw)
      throw ShapeError("encode: observation shape " + shape_str(obs.shape()) +
                       " does not match configured input");
    Tensor<T> h = obs;
    for (int i = 0; i < config_.layer_count(); ++i)
      h = relu(conv2d(h, layers_[i].w, layers_[i].b, config_.strides[i],
                      config_.paddings[i]));
    return h;
  }

  FeatureMap<T> encode_view(const Tensor<T>& obs, ViewId view) const {
    return {encode(obs), view};
  }

  void collect_params(std::vector<Tensor<T>*>& out) {
    for (auto& l : layers_) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    }
  }

 private:
  EncoderConfig config_;
  std::vector<ConvLayer<T>> layers_;
};

}  // namespace mvrl

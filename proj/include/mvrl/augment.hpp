#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "mvrl/errors.hpp"
#include "mvrl/rng.hpp"
#include "mvrl/tensor.hpp"

namespace mvrl {

struct AugmentConfig {
  int max_shift = 4;
  double factor_lo = 0.6, factor_hi = 1.4;  // brightness/contrast/saturation
  double hue_range = 0.1;                   // fraction of the hue circle

  // A configuration under which augmentation is the identity.
  static AugmentConfig none() { return {0, 1.0, 1.0, 0.0}; }
};

struct AugmentParams {
  int dx = 0, dy = 0;
  double brightness = 1.0, contrast = 1.0, saturation = 1.0;
  double hue = 0.0;
};

// Uniform draw over the configured augmentation space.
inline AugmentParams sample_params(Rng& rng, const AugmentConfig& cfg) {
  AugmentParams p;
  p.dx = static_cast<int>(rng.uniform_int(-cfg.max_shift, cfg.max_shift));
  p.dy = static_cast<int>(rng.uniform_int(-cfg.max_shift, cfg.max_shift));
  p.brightness = rng.uniform(cfg.factor_lo, cfg.factor_hi);
  p.contrast = rng.uniform(cfg.factor_lo, cfg.factor_hi);
  p.saturation = rng.uniform(cfg.factor_lo, cfg.factor_hi);
  p.hue = rng.uniform(-cfg.hue_range, cfg.hue_range);
  return p;
}

namespace detail {

template <typename T>
void rgb_to_hsv(T r, T g, T b, T& h, T& s, T& v) {
  const T mx = std::max({r, g, b});
  const T mn = std::min({r, g, b});
  const T d = mx - mn;
  v = mx;
  s = mx > T(0) ? d / mx : T(0);
  if (d <= T(0)) {
    h = T(0);
  } else if (mx == r) {
    h = (g - b) / d;
    if (h < T(0)) h += T(6);
  } else if (mx == g) {
    h = (b - r) / d + T(2);
  } else {
    h = (r - g) / d + T(4);
  }
  h /= T(6);
}

template <typename T>
void hsv_to_rgb(T h, T s, T v, T& r, T& g, T& b) {
  h = h - std::floor(h);
  const T hh = h * T(6);
  const int sector = std::min(5, static_cast<int>(hh));
  const T f = hh - static_cast<T>(sector);
  const T p = v * (T(1) - s);
  const T q = v * (T(1) - s * f);
  const T t = v * (T(1) - s * (T(1) - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

template <typename T>
T luma(T r, T g, T b) {
  return T(0.299) * r + T(0.587) * g + T(0.114) * b;
}

}  // namespace detail

// Translates the image by (dx, dy) pixels — positive dx moves content right,
// positive dy moves it down — replicating edge rows/columns into the vacated
// border. Output shape equals input shape.
template <typename T>
Tensor<T> random_shift(const Tensor<T>& img, int dx, int dy) {
  if (img.rank() != 3) throw ShapeError("random_shift: expects [C,H,W]");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<T> out(img.numel());
  for (int ci = 0; ci < c; ++ci) {
    const T* src = img.data().data() + static_cast<std::size_t>(ci) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(ci) * h * w;
    for (int r = 0; r < h; ++r) {
      const int sr = std::clamp(r - dy, 0, h - 1);
      for (int col = 0; col < w; ++col) {
        const int sc = std::clamp(col - dx, 0, w - 1);
        dst[static_cast<std::size_t>(r) * w + col] =
            src[static_cast<std::size_t>(sr) * w + sc];
      }
    }
  }
  return Tensor<T>({c, h, w}, std::move(out));
}

// Brightness, contrast, saturation, hue — applied in that fixed order, each
// stage clamped back to [0,1].
template <typename T>
Tensor<T> color_jitter(const Tensor<T>& img, const AugmentParams& p) {
  if (img.rank() != 3 || img.dim(0) != 3)
    throw ShapeError("color_jitter: expects [3,H,W] RGB");
  const int npix = img.dim(1) * img.dim(2);
  std::vector<T> v = img.data();
  T* r = v.data();
  T* g = v.data() + npix;
  T* b = v.data() + 2 * npix;
  auto clamp01 = [](T x) { return std::clamp(x, T(0), T(1)); };

  if (p.brightness != 1.0) {
    for (int i = 0; i < npix; ++i) {
      r[i] = clamp01(r[i] * T(p.brightness));
      g[i] = clamp01(g[i] * T(p.brightness));
      b[i] = clamp01(b[i] * T(p.brightness));
    }
  }

  if (p.contrast != 1.0) {
    T mean_luma = 0;
    for (int i = 0; i < npix; ++i) mean_luma += detail::luma(r[i], g[i], b[i]);
    mean_luma /= static_cast<T>(npix);
    for (int i = 0; i < npix; ++i) {
      r[i] = clamp01(mean_luma + (r[i] - mean_luma) * T(p.contrast));
      g[i] = clamp01(mean_luma + (g[i] - mean_luma) * T(p.contrast));
      b[i] = clamp01(mean_luma + (b[i] - mean_luma) * T(p.contrast));
    }
  }

  if (p.saturation != 1.0) {
    for (int i = 0; i < npix; ++i) {
      const T gray = detail::luma(r[i], g[i], b[i]);
      r[i] = clamp01(gray + (r[i] - gray) * T(p.saturation));
      g[i] = clamp01(gray + (g[i] - gray) * T(p.saturation));
      b[i] = clamp01(gray + (b[i] - gray) * T(p.saturation));
    }
  }

  if (p.hue != 0.0) {
    for (int i = 0; i < npix; ++i) {
      T h, s, val;
      detail::rgb_to_hsv(r[i], g[i], b[i], h, s, val);
      detail::hsv_to_rgb(h + T(p.hue), s, val, r[i], g[i], b[i]);
      r[i] = clamp01(r[i]);
      g[i] = clamp01(g[i]);
      b[i] = clamp01(b[i]);
    }
  }
  return Tensor<T>(img.shape(), std::move(v));
}

template <typename T>
Tensor<T> augment(const Tensor<T>& img, const AugmentParams& p) {
  return color_jitter(random_shift(img, p.dx, p.dy), p);
}

// Training-time augmentation of a two-view observation: each view gets its
// own independent parameter draw.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment_pair(const Tensor<T>& ego,
                                             const Tensor<T>& third, Rng& rng,
                                             const AugmentConfig& cfg) {
  const AugmentParams p1 = sample_params(rng, cfg);
  const AugmentParams p2 = sample_params(rng, cfg);
  return {augment(ego, p1), augment(third, p2)};
}

}  // namespace mvrl

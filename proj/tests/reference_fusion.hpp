#pragma once

// Fully-explicit scalar reference of the cross-view attention computation:
// pre-norm, 1x1 Q/K/V projections, scaled dot-product attention over key
// positions, value lookup, residual, post-norm, position-wise MLP. Written
// with plain loops over std::vector<double> so it shares no code with the
// library implementation.

#include <algorithm>
#include <cmath>
#include <vector>

namespace refimpl {

struct Proj {
  std::vector<double> ln_g, ln_b;          // [C]
  std::vector<double> qw, qb, kw, kb, vw, vb;  // [C*C] row-major, [C]
};

struct Branch {
  std::vector<double> ln_g, ln_b;      // [C]
  std::vector<double> g1w, g1b;        // [2C*C], [2C]
  std::vector<double> g2w, g2b;        // [C*2C], [C]
};

// Channel-axis layer norm at each of p positions; x is [C*P] row-major.
inline std::vector<double> layer_norm(const std::vector<double>& x, int c, int p,
                                      const std::vector<double>& g,
                                      const std::vector<double>& b,
                                      double eps = 1e-5) {
  std::vector<double> out(x.size());
  for (int j = 0; j < p; ++j) {
    double mu = 0;
    for (int ci = 0; ci < c; ++ci) mu += x[ci * p + j];
    mu /= c;
    double var = 0;
    for (int ci = 0; ci < c; ++ci) {
      const double d = x[ci * p + j] - mu;
      var += d * d;
    }
    var /= c;
    const double istd = 1.0 / std::sqrt(var + eps);
    for (int ci = 0; ci < c; ++ci)
      out[ci * p + j] = (x[ci * p + j] - mu) * istd * g[ci] + b[ci];
  }
  return out;
}

// y[co][j] = sum_ci w[co][ci] x[ci][j] + b[co]
inline std::vector<double> pointwise_affine(const std::vector<double>& x, int ci_n,
                                            int p, const std::vector<double>& w,
                                            const std::vector<double>& b,
                                            int co_n) {
  std::vector<double> out(static_cast<std::size_t>(co_n) * p, 0.0);
  for (int co = 0; co < co_n; ++co)
    for (int j = 0; j < p; ++j) {
      double acc = b[co];
      for (int ci = 0; ci < ci_n; ++ci)
        acc += w[co * ci_n + ci] * x[ci * p + j];
      out[co * p + j] = acc;
    }
  return out;
}

// A[i][j] = softmax over i of (sum_c K[c][i] Q[c][j] / sqrt(C)).
inline std::vector<double> attention(const std::vector<double>& q,
                                     const std::vector<double>& k, int c, int nq,
                                     int nkv) {
  std::vector<double> a(static_cast<std::size_t>(nkv) * nq, 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  for (int j = 0; j < nq; ++j) {
    std::vector<double> logits(nkv);
    for (int i = 0; i < nkv; ++i) {
      double dot = 0;
      for (int ci = 0; ci < c; ++ci) dot += k[ci * nkv + i] * q[ci * nq + j];
      logits[i] = dot * scale;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (int i = 0; i < nkv; ++i) z += std::exp(logits[i] - mx);
    for (int i = 0; i < nkv; ++i) a[i * nq + j] = std::exp(logits[i] - mx) / z;
  }
  return a;
}

// One attention branch: g(LN(z_q + V_kv A)), queries from z_q.
inline std::vector<double> cross_attend(const std::vector<double>& zq,
                                        const std::vector<double>& zkv, int c,
                                        int p, const Proj& pq, const Proj& pkv,
                                        const Branch& br) {
  auto nq = layer_norm(zq, c, p, pq.ln_g, pq.ln_b);
  auto nkv = layer_norm(zkv, c, p, pkv.ln_g, pkv.ln_b);
  auto q = pointwise_affine(nq, c, p, pq.qw, pq.qb, c);
  auto k = pointwise_affine(nkv, c, p, pkv.kw, pkv.kb, c);
  auto v = pointwise_affine(nkv, c, p, pkv.vw, pkv.vb, c);
  auto a = attention(q, k, c, p, p);

  std::vector<double> res(static_cast<std::size_t>(c) * p);
  for (int ci = 0; ci < c; ++ci)
    for (int j = 0; j < p; ++j) {
      double acc = 0;
      for (int i = 0; i < p; ++i) acc += v[ci * p + i] * a[i * p + j];
      res[ci * p + j] = zq[ci * p + j] + acc;
    }

  auto s = layer_norm(res, c, p, br.ln_g, br.ln_b);
  auto hidden = pointwise_affine(s, c, p, br.g1w, br.g1b, 2 * c);
  for (auto& hv : hidden) hv = std::max(hv, 0.0);
  return pointwise_affine(hidden, 2 * c, p, br.g2w, br.g2b, c);
}

// Bidirectional fusion: sum of both branch outputs.
inline std::vector<double> fuse_bidirectional(
    const std::vector<double>& z_ego, const std::vector<double>& z_third, int c,
    int p, const Proj& proj_ego, const Proj& proj_third, const Branch& br_ego,
    const Branch& br_third) {
  auto h1 = cross_attend(z_ego, z_third, c, p, proj_ego, proj_third, br_ego);
  auto h2 = cross_attend(z_third, z_ego, c, p, proj_third, proj_ego, br_third);
  for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += h2[i];
  return h1;
}

}  // namespace refimpl

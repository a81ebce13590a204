#pragma once

// Naive reference implementations used as test oracles. Deliberately written
// as plain nested loops over raw indices, sharing no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "protofed/tensor.hpp"

namespace oracle {

using protofed::Shape;
using protofed::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int pad) {
  const int N = int(x.dim(0)), C = int(x.dim(1)), H = int(x.dim(2)), W = int(x.dim(3));
  const int O = int(k.dim(0)), kh = int(k.dim(2)), kw = int(k.dim(3));
  const int Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y(Shape{std::size_t(N), std::size_t(O), std::size_t(Ho), std::size_t(Wo)});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                const int r = i * stride - pad + u, s = j * stride - pad + v;
                if (r < 0 || r >= H || s < 0 || s >= W) continue;
                acc += x.at(n, c, r, s) * k.at(o, c, u, v);
              }
          if (!b.empty()) acc += b[o];
          y.at(n, o, i, j) = acc;
        }
  return y;
}

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
  return y;
}

inline Tensor maxpool(const Tensor& x, int win, int stride) {
  const std::size_t Ho = (x.dim(2) - win) / stride + 1, Wo = (x.dim(3) - win) / stride + 1;
  Tensor y(Shape{x.dim(0), x.dim(1), Ho, Wo});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double m = -std::numeric_limits<double>::infinity();
          for (int u = 0; u < win; ++u)
            for (int v = 0; v < win; ++v) m = std::max(m, x.at(n, c, i * stride + u, j * stride + v));
          y.at(n, c, i, j) = m;
        }
  return y;
}

inline Tensor matmul(const Tensor& a, const Tensor& w) {
  const std::size_t B = a.dim(0), M = a.dim(1), C = w.dim(1);
  Tensor y(Shape{B, C});
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t k = 0; k < C; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < M; ++j) acc += a[i * M + j] * w[j * C + k];
      y[i * C + k] = acc;
    }
  return y;
}

// Squared distance of every window to every template.
inline Tensor sliding(const Tensor& z, const Tensor& p) {
  const std::size_t N = z.dim(0), D = z.dim(1), H = z.dim(2), W = z.dim(3);
  const std::size_t m = p.dim(0), h = p.dim(2), w = p.dim(3);
  Tensor d(Shape{N, m, H - h + 1, W - w + 1});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t r = 0; r + h <= H; ++r)
        for (std::size_t s = 0; s + w <= W; ++s) {
          double acc = 0.0;
          for (std::size_t c = 0; c < D; ++c)
            for (std::size_t u = 0; u < h; ++u)
              for (std::size_t v = 0; v < w; ++v) {
                const double diff = z.at(n, c, r + u, s + v) - p.at(j, c, u, v);
                acc += diff * diff;
              }
          d.at(n, j, r, s) = acc;
        }
  return d;
}

// N x m minimum over the spatial axes.
inline std::vector<std::vector<double>> spatial_min(const Tensor& d) {
  std::vector<std::vector<double>> out(d.dim(0), std::vector<double>(d.dim(1)));
  for (std::size_t n = 0; n < d.dim(0); ++n)
    for (std::size_t j = 0; j < d.dim(1); ++j) {
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < d.dim(2); ++r)
        for (std::size_t s = 0; s < d.dim(3); ++s) m = std::min(m, d.at(n, j, r, s));
      out[n][j] = m;
    }
  return out;
}

inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < C; ++k) z += std::exp(logits[i * C + k]);
    total += -std::log(std::exp(logits[i * C + labels[i]]) / z);
  }
  return total / double(B);
}

// Mean over samples of the minimum distance to prototypes of (correct) the
// label's class or (!correct) any other class.
inline double class_min(const Tensor& d, const std::vector<int>& labels,
                        const std::vector<int>& classes, bool correct) {
  const auto mins = spatial_min(d);
  double total = 0.0;
  for (std::size_t n = 0; n < mins.size(); ++n) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < classes.size(); ++j) {
      if ((classes[j] == labels[n]) == correct) m = std::min(m, mins[n][j]);
    }
    total += m;
  }
  return total / double(mins.size());
}

}  // namespace oracle

#include "protofed/ops.hpp"

#include <algorithm>
#include <limits>
#include <string>

namespace protofed::ops {

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(what) + " must have rank " + std::to_string(rank) +
                      ", got shape " + shape_to_string(t.shape()));
  }
}

// Output positions [lo, hi] whose input coordinate o*stride + k - pad lies in [0, extent).
struct Range {
  long lo;
  long hi;
};

Range valid_range(long extent, long out_extent, long k, long stride, long pad) {
  long lo = pad - k > 0 ? (pad - k + stride - 1) / stride : 0;
  long top = extent - 1 + pad - k;
  long hi = top >= 0 ? top / stride : -1;
  hi = std::min(hi, out_extent - 1);
  return {lo, hi};
}

}  // namespace

Shape conv2d_output_shape(const Shape& input, const Shape& kernel, ConvGeometry geom) {
  if (input.size() != 4 || kernel.size() != 4) {
    throw ConfigError("conv2d expects rank-4 input and kernel, got " + shape_to_string(input) +
                      " and " + shape_to_string(kernel));
  }
  if (geom.stride < 1) throw ConfigError("conv2d stride must be >= 1");
  if (geom.padding < 0) throw ConfigError("conv2d padding must be >= 0");
  if (kernel[1] != input[1]) {
    throw ConfigError("conv2d kernel in-channels " + std::to_string(kernel[1]) +
                      " do not match input channels " + std::to_string(input[1]) +
                      " (input " + shape_to_string(input) + ", kernel " +
                      shape_to_string(kernel) + ")");
  }
  long ph = static_cast<long>(input[2]) + 2L * geom.padding;
  long pw = static_cast<long>(input[3]) + 2L * geom.padding;
  if (ph < static_cast<long>(kernel[2]) || pw < static_cast<long>(kernel[3])) {
    throw ConfigError("conv2d kernel " + shape_to_string(kernel) + " larger than padded input " +
                      shape_to_string(input));
  }
  std::size_t oh = static_cast<std::size_t>((ph - static_cast<long>(kernel[2])) / geom.stride + 1);
  std::size_t ow = static_cast<std::size_t>((pw - static_cast<long>(kernel[3])) / geom.stride + 1);
  return {input[0], kernel[0], oh, ow};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvGeometry geom) {
  Shape out_shape = conv2d_output_shape(input.shape(), kernel.shape(), geom);
  if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
    throw ConfigError("conv2d bias shape " + shape_to_string(bias.shape()) +
                      " does not match out-channels " + std::to_string(kernel.dim(0)));
  }
  const long N = static_cast<long>(input.dim(0)), C = static_cast<long>(input.dim(1));
  const long H = static_cast<long>(input.dim(2)), W = static_cast<long>(input.dim(3));
  const long O = static_cast<long>(kernel.dim(0));
  const long KH = static_cast<long>(kernel.dim(2)), KW = static_cast<long>(kernel.dim(3));
  const long OH = static_cast<long>(out_shape[2]), OW = static_cast<long>(out_shape[3]);
  const long s = geom.stride, p = geom.padding;

  Tensor out(out_shape, 0.0);
  const double* in = input.data().data();
  const double* k = kernel.data().data();
  double* o_data = out.data().data();

  if (s == 1) {
    // Zero-padded planes of width PW; outputs are accumulated in the same
    // row pitch so every (c, ky, kx) term is one long contiguous loop. Padding
    // contributes w * 0 = +-0, which leaves every partial sum unchanged.
    const long PW = W + 2 * p, PH = H + 2 * p;
    const long span = (OH - 1) * PW + OW;
    std::vector<double> padded(static_cast<std::size_t>(C * PH * PW), 0.0);
    std::vector<double> acc_buf(static_cast<std::size_t>(4 * OH * PW));
    for (long n = 0; n < N; ++n) {
      for (long c = 0; c < C; ++c) {
        for (long y = 0; y < H; ++y) {
          std::copy_n(in + ((n * C + c) * H + y) * W, W,
                      padded.data() + (c * PH + y + p) * PW + p);
        }
      }
      // Four output channels per sweep so each loaded input feeds four sums.
      for (long o0 = 0; o0 < O; o0 += 4) {
        const long group = std::min<long>(4, O - o0);
        std::fill(acc_buf.begin(), acc_buf.end(), 0.0);
        double* __restrict a0 = acc_buf.data();
        double* __restrict a1 = a0 + OH * PW;
        double* __restrict a2 = a1 + OH * PW;
        double* __restrict a3 = a2 + OH * PW;
        for (long c = 0; c < C; ++c) {
          const double* plane = padded.data() + c * PH * PW;
          for (long ky = 0; ky < KH; ++ky) {
            for (long kx = 0; kx < KW; ++kx) {
              auto wt = [&](long j) {
                return j < group ? k[(((o0 + j) * C + c) * KH + ky) * KW + kx] : 0.0;
              };
              const double w0 = wt(0), w1 = wt(1), w2 = wt(2), w3 = wt(3);
              const double* __restrict src = plane + ky * PW + kx;
              for (long i = 0; i < span; ++i) {
                const double v = src[i];
                a0[i] += w0 * v;
                a1[i] += w1 * v;
                a2[i] += w2 * v;
                a3[i] += w3 * v;
              }
            }
          }
        }
        for (long j = 0; j < group; ++j) {
          const double* acc = acc_buf.data() + j * OH * PW;
          double* dst = o_data + (n * O + o0 + j) * OH * OW;
          const double b = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o0 + j)];
          for (long oy = 0; oy < OH; ++oy) {
            for (long ox = 0; ox < OW; ++ox) {
              dst[oy * OW + ox] = bias.empty() ? acc[oy * PW + ox] : acc[oy * PW + ox] + b;
            }
          }
        }
      }
    }
    return out;
  }

  for (long n = 0; n < N; ++n) {
    for (long o = 0; o < O; ++o) {
      double* __restrict acc = o_data + (n * O + o) * OH * OW;
      for (long c = 0; c < C; ++c) {
        const double* plane = in + (n * C + c) * H * W;
        for (long ky = 0; ky < KH; ++ky) {
          Range ry = valid_range(H, OH, ky, s, p);
          for (long kx = 0; kx < KW; ++kx) {
            const double w = k[((o * C + c) * KH + ky) * KW + kx];
            Range rx = valid_range(W, OW, kx, s, p);
            for (long oy = ry.lo; oy <= ry.hi; ++oy) {
              const double* __restrict row = plane + (oy * s + ky - p) * W;
              double* __restrict arow = acc + oy * OW;
              for (long ox = rx.lo; ox <= rx.hi; ++ox) arow[ox] += w * row[ox * s + kx - p];
            }
          }
        }
      }
      if (!bias.empty()) {
        const double b = bias[o];
        for (long i = 0; i < OH * OW; ++i) acc[i] += b;
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                          ConvGeometry geom, ConvGradRequest request) {
  Shape out_shape = conv2d_output_shape(input.shape(), kernel.shape(), geom);
  if (grad_out.shape() != out_shape) {
    throw ConfigError("conv2d_backward: gradient shape " + shape_to_string(grad_out.shape()) +
                      " does not match output shape " + shape_to_string(out_shape));
  }
  const long N = static_cast<long>(input.dim(0)), C = static_cast<long>(input.dim(1));
  const long H = static_cast<long>(input.dim(2)), W = static_cast<long>(input.dim(3));
  const long O = static_cast<long>(kernel.dim(0));
  const long KH = static_cast<long>(kernel.dim(2)), KW = static_cast<long>(kernel.dim(3));
  const long OH = static_cast<long>(out_shape[2]), OW = static_cast<long>(out_shape[3]);
  const long s = geom.stride, p = geom.padding;

  const double* in = input.data().data();
  const double* k = kernel.data().data();
  const double* g = grad_out.data().data();

  ConvGrads grads;
  if (request.input && s == 1) {
    // Scatter into zero-padded planes with the output row pitch, then crop.
    const long PW = W + 2 * p, PH = H + 2 * p;
    const long span = (OH - 1) * PW + OW;
    std::vector<double> gpad(static_cast<std::size_t>(C * PH * PW));
    std::vector<double> gout_buf(static_cast<std::size_t>(OH * PW), 0.0);
    grads.input = Tensor(input.shape(), 0.0);
    double* gi = grads.input.data().data();
    for (long n = 0; n < N; ++n) {
      std::fill(gpad.begin(), gpad.end(), 0.0);
      for (long o = 0; o < O; ++o) {
        const double* gout = g + (n * O + o) * OH * OW;
        for (long oy = 0; oy < OH; ++oy) std::copy_n(gout + oy * OW, OW, gout_buf.data() + oy * PW);
        const double* __restrict grow = gout_buf.data();
        for (long c = 0; c < C; ++c) {
          double* plane = gpad.data() + c * PH * PW;
          for (long ky = 0; ky < KH; ++ky) {
            for (long kx = 0; kx < KW; ++kx) {
              const double w = k[((o * C + c) * KH + ky) * KW + kx];
              double* __restrict dst = plane + ky * PW + kx;
              for (long i = 0; i < span; ++i) dst[i] += w * grow[i];
            }
          }
        }
      }
      for (long c = 0; c < C; ++c) {
        for (long y = 0; y < H; ++y) {
          std::copy_n(gpad.data() + (c * PH + y + p) * PW + p, W, gi + ((n * C + c) * H + y) * W);
        }
      }
    }
  } else if (request.input) {
    grads.input = Tensor(input.shape(), 0.0);
    double* gi = grads.input.data().data();
    for (long n = 0; n < N; ++n) {
      for (long c = 0; c < C; ++c) {
        double* gplane = gi + (n * C + c) * H * W;
        for (long o = 0; o < O; ++o) {
          const double* gout = g + (n * O + o) * OH * OW;
          for (long ky = 0; ky < KH; ++ky) {
            Range ry = valid_range(H, OH, ky, s, p);
            for (long kx = 0; kx < KW; ++kx) {
              const double w = k[((o * C + c) * KH + ky) * KW + kx];
              Range rx = valid_range(W, OW, kx, s, p);
              for (long oy = ry.lo; oy <= ry.hi; ++oy) {
                double* __restrict row = gplane + (oy * s + ky - p) * W;
                const double* __restrict grow = gout + oy * OW;
                for (long ox = rx.lo; ox <= rx.hi; ++ox) row[ox * s + kx - p] += w * grow[ox];
              }
            }
          }
        }
      }
    }
  }

  if (request.kernel) {
    grads.kernel = Tensor(kernel.shape(), 0.0);
    double* gk = grads.kernel.data().data();
    std::vector<double> lane(static_cast<std::size_t>(OW));
    for (long o = 0; o < O; ++o) {
      for (long c = 0; c < C; ++c) {
        for (long ky = 0; ky < KH; ++ky) {
          Range ry = valid_range(H, OH, ky, s, p);
          for (long kx = 0; kx < KW; ++kx) {
            Range rx = valid_range(W, OW, kx, s, p);
            std::fill(lane.begin(), lane.end(), 0.0);
            double* __restrict acc = lane.data();
            for (long n = 0; n < N; ++n) {
              const double* plane = in + (n * C + c) * H * W;
              const double* gout = g + (n * O + o) * OH * OW;
              for (long oy = ry.lo; oy <= ry.hi; ++oy) {
                const double* __restrict row = plane + (oy * s + ky - p) * W;
                const double* __restrict grow = gout + oy * OW;
                if (s == 1) {
                  const double* __restrict src = row + kx - p;
                  for (long ox = rx.lo; ox <= rx.hi; ++ox) acc[ox] += grow[ox] * src[ox];
                } else {
                  for (long ox = rx.lo; ox <= rx.hi; ++ox) acc[ox] += grow[ox] * row[ox * s + kx - p];
                }
              }
            }
            double total = 0.0;
            for (double v : lane) total += v;
            gk[((o * C + c) * KH + ky) * KW + kx] = total;
          }
        }
      }
    }
  }

  if (request.bias) {
    grads.bias = Tensor(Shape{static_cast<std::size_t>(O)}, 0.0);
    for (long n = 0; n < N; ++n) {
      for (long o = 0; o < O; ++o) {
        const double* gout = g + (n * O + o) * OH * OW;
        double total = 0.0;
        for (long i = 0; i < OH * OW; ++i) total += gout[i];
        grads.bias[static_cast<std::size_t>(o)] += total;
      }
    }
  }
  return grads;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_same_shape(input, grad_out, "relu_backward");
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
  return out;
}

PoolResult maxpool2d(const Tensor& input, int window, int stride) {
  require_rank(input, 4, "maxpool2d input");
  if (window < 1 || stride < 1) throw ConfigError("maxpool2d window and stride must be >= 1");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto win = static_cast<std::size_t>(window), st = static_cast<std::size_t>(stride);
  if (H < win || W < win) {
    throw ConfigError("maxpool2d window " + std::to_string(window) + " exceeds spatial extent " +
                      shape_to_string(input.shape()));
  }
  const std::size_t OH = (H - win) / st + 1, OW = (W - win) / st + 1;
  PoolResult result{Tensor(Shape{N, C, OH, OW}), {}};
  result.argmax.resize(result.output.size());
  const double* in = input.data().data();
  std::size_t out_i = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox, ++out_i) {
        std::size_t best = base + oy * st * W + ox * st;
        double best_v = in[best];
        for (std::size_t dy = 0; dy < win; ++dy) {
          for (std::size_t dx = 0; dx < win; ++dx) {
            std::size_t idx = base + (oy * st + dy) * W + ox * st + dx;
            if (in[idx] > best_v) {
              best_v = in[idx];
              best = idx;
            }
          }
        }
        result.output[out_i] = best_v;
        result.argmax[out_i] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return result;
}

Tensor maxpool2d_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                          const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) {
    throw ConfigError("maxpool2d_backward: gradient does not match recorded argmax");
  }
  Tensor grad(input_shape, 0.0);
  for (std::size_t i = 0; i < argmax.size(); ++i) grad[argmax[i]] += grad_out[i];
  return grad;
}

Tensor linear(const Tensor& input, const Tensor& weights) {
  require_rank(input, 2, "linear input");
  require_rank(weights, 2, "linear weights");
  if (input.dim(1) != weights.dim(0)) {
    throw ConfigError("linear inner extents differ: input " + shape_to_string(input.shape()) +
                      " vs weights " + shape_to_string(weights.shape()));
  }
  const std::size_t B = input.dim(0), M = input.dim(1), C = weights.dim(1);
  Tensor out(Shape{B, C}, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < M; ++k) acc += input[b * M + k] * weights[k * C + c];
      out[b * C + c] = acc;
    }
  }
  return out;
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out) {
  const std::size_t B = input.dim(0), M = input.dim(1), C = weights.dim(1);
  if (grad_out.shape() != Shape{B, C}) {
    throw ConfigError("linear_backward: gradient shape " + shape_to_string(grad_out.shape()));
  }
  LinearGrads grads{Tensor(input.shape(), 0.0), Tensor(weights.shape(), 0.0)};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < M; ++k) {
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c) acc += grad_out[b * C + c] * weights[k * C + c];
      grads.input[b * M + k] = acc;
    }
  }
  for (std::size_t k = 0; k < M; ++k) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b) acc += input[b * M + k] * grad_out[b * C + c];
      grads.weights[k * C + c] = acc;
    }
  }
  return grads;
}

namespace {

void check_sliding(const Tensor& feature, const Tensor& templates) {
  require_rank(feature, 4, "sliding_sq_l2 feature");
  require_rank(templates, 4, "sliding_sq_l2 templates");
  if (feature.dim(1) != templates.dim(1)) {
    throw ConfigError("sliding_sq_l2 depth mismatch: feature " + shape_to_string(feature.shape()) +
                      " vs template " + shape_to_string(templates.shape()));
  }
  if (templates.dim(2) > feature.dim(2) || templates.dim(3) > feature.dim(3)) {
    throw ConfigError("sliding_sq_l2 template " + shape_to_string(templates.shape()) +
                      " larger than feature map " + shape_to_string(feature.shape()));
  }
}

}  // namespace

Tensor sliding_sq_l2(const Tensor& feature, const Tensor& templates) {
  check_sliding(feature, templates);
  const std::size_t N = feature.dim(0), D = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  const std::size_t M = templates.dim(0), th = templates.dim(2), tw = templates.dim(3);
  const std::size_t OH = H - th + 1, OW = W - tw + 1;
  Tensor out(Shape{N, M, OH, OW}, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < M; ++j) {
      for (std::size_t y = 0; y < OH; ++y) {
        for (std::size_t x = 0; x < OW; ++x) {
          double acc = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t ky = 0; ky < th; ++ky) {
              for (std::size_t kx = 0; kx < tw; ++kx) {
                double diff = feature.at(n, d, y + ky, x + kx) - templates.at(j, d, ky, kx);
                acc += diff * diff;
              }
            }
          }
          out.at(n, j, y, x) = acc;
        }
      }
    }
  }
  return out;
}

Tensor sliding_sq_l2_single(const Tensor& feature, const Tensor& templ) {
  require_rank(templ, 3, "sliding_sq_l2 template");
  Shape s = templ.shape();
  Tensor maps = sliding_sq_l2(feature, templ.reshaped({1, s[0], s[1], s[2]}));
  Shape out = maps.shape();
  return maps.reshaped({out[0], out[2], out[3]});
}

SlidingGrads sliding_sq_l2_backward(const Tensor& feature, const Tensor& templates,
                                    const Tensor& grad_out, bool want_feature,
                                    bool want_templates) {
  check_sliding(feature, templates);
  const std::size_t N = feature.dim(0), D = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  const std::size_t M = templates.dim(0), th = templates.dim(2), tw = templates.dim(3);
  const std::size_t OH = H - th + 1, OW = W - tw + 1;
  if (grad_out.shape() != Shape{N, M, OH, OW}) {
    throw ConfigError("sliding_sq_l2_backward: gradient shape " +
                      shape_to_string(grad_out.shape()));
  }
  SlidingGrads grads;
  if (want_feature) grads.feature = Tensor(feature.shape(), 0.0);
  if (want_templates) grads.templates = Tensor(templates.shape(), 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < M; ++j) {
      for (std::size_t y = 0; y < OH; ++y) {
        for (std::size_t x = 0; x < OW; ++x) {
          const double g = grad_out.at(n, j, y, x);
          if (g == 0.0) continue;
          for (std::size_t d = 0; d < D; ++d) {
            for (std::size_t ky = 0; ky < th; ++ky) {
              for (std::size_t kx = 0; kx < tw; ++kx) {
                double diff = feature.at(n, d, y + ky, x + kx) - templates.at(j, d, ky, kx);
                if (want_feature) grads.feature.at(n, d, y + ky, x + kx) += 2.0 * diff * g;
                if (want_templates) grads.templates.at(j, d, ky, kx) -= 2.0 * diff * g;
              }
            }
          }
        }
      }
    }
  }
  return grads;
}

MinResult spatial_min(const Tensor& maps) {
  require_rank(maps, 4, "spatial_min input");
  const std::size_t N = maps.dim(0), M = maps.dim(1), plane = maps.dim(2) * maps.dim(3);
  MinResult result{Tensor(Shape{N, M}), std::vector<std::uint32_t>(N * M)};
  for (std::size_t i = 0; i < N * M; ++i) {
    std::size_t best = i * plane;
    for (std::size_t q = i * plane + 1; q < (i + 1) * plane; ++q) {
      if (maps[q] < maps[best]) best = q;
    }
    result.values[i] = maps[best];
    result.argmin[i] = static_cast<std::uint32_t>(best);
  }
  return result;
}

Tensor spatial_min_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmin,
                            const Tensor& grad_out) {
  if (argmin.size() != grad_out.size()) {
    throw ConfigError("spatial_min_backward: gradient does not match recorded argmin");
  }
  Tensor grad(input_shape, 0.0);
  for (std::size_t i = 0; i < argmin.size(); ++i) grad[argmin[i]] += grad_out[i];
  return grad;
}

}  // namespace protofed::ops

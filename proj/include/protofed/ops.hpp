#pragma once

#include <cstdint>
#include <vector>

#include "protofed/tensor.hpp"

// Forward and gradient kernels for the differentiable primitives. Every
// function here is pure; the tape in autograd.hpp wires them together.
namespace protofed::ops {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};

// Cross-correlation (no kernel flip). input N x C x H x W, kernel O x C x kh x kw,
// bias O or empty. Each output is accumulated over (c, ky, kx) in that order
// starting from zero, then the bias is added.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, ConvGeometry geom);
Shape conv2d_output_shape(const Shape& input, const Shape& kernel, ConvGeometry geom);

struct ConvGradRequest {
  bool input = true;
  bool kernel = true;
  bool bias = true;
};

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                          ConvGeometry geom, ConvGradRequest request);

Tensor relu(const Tensor& input);
// Gradient passes where input > 0; the subgradient at 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

struct PoolResult {
  Tensor output;
  // Flat index into the input tensor of each output's (first) maximum.
  std::vector<std::uint32_t> argmax;
};

PoolResult maxpool2d(const Tensor& input, int window, int stride);
Tensor maxpool2d_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                          const Tensor& grad_out);

// input B x m times weights m x C.
Tensor linear(const Tensor& input, const Tensor& weights);
struct LinearGrads {
  Tensor input;
  Tensor weights;
};
LinearGrads linear_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out);

// Squared l2 distance between every h x w window of the feature map and each
// template. feature N x D x H x W, templates m x D x h x w, output
// N x m x (H-h+1) x (W-w+1). Computed from differences, so an exact window
// match yields exactly zero.
Tensor sliding_sq_l2(const Tensor& feature, const Tensor& templates);
// Single template D x h x w; output N x (H-h+1) x (W-w+1).
Tensor sliding_sq_l2_single(const Tensor& feature, const Tensor& templ);

struct SlidingGrads {
  Tensor feature;
  Tensor templates;
};
SlidingGrads sliding_sq_l2_backward(const Tensor& feature, const Tensor& templates,
                                    const Tensor& grad_out, bool want_feature,
                                    bool want_templates);

struct MinResult {
  Tensor values;  // N x m
  std::vector<std::uint32_t> argmin;  // flat index into the input
};

// Minimum over the two trailing (spatial) axes; ties go to the first
// position in row-major order.
MinResult spatial_min(const Tensor& maps);
Tensor spatial_min_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmin,
                            const Tensor& grad_out);

}  // namespace protofed::ops

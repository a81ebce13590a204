#include "protofed/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace protofed::ad {

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, nullptr});
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
  nodes_.push_back(Node{std::move(value), Tensor(), requires_grad,
                        requires_grad ? std::move(backward) : BackwardFn()});
  return Var{nodes_.size() - 1};
}

void Tape::accumulate(Var v, Tensor g) {
  Node& node = nodes_.at(v.id);
  if (!node.requires_grad) return;
  if (node.grad.empty()) {
    require_same_shape(node.value, g, "gradient accumulation");
    node.grad = std::move(g);
  } else {
    node.grad += g;
  }
}

void Tape::backward(Var root) {
  Node& r = nodes_.at(root.id);
  if (r.value.size() != 1) {
    throw ConfigError("backward() needs a scalar root, got shape " +
                      shape_to_string(r.value.shape()));
  }
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && !node.grad.empty()) node.backward(*this, node.grad);
  }
}

namespace {

bool any_grad(const Tape& tape, std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(),
                     [&](Var v) { return v.valid() && tape.requires_grad(v); });
}

Var scalar_var(Tape& tape, double value, bool requires_grad, BackwardFn fn) {
  return tape.record(Tensor::scalar(value), requires_grad, std::move(fn));
}

}  // namespace

Var conv2d(Tape& tape, Var input, Var kernel, std::optional<Var> bias, ops::ConvGeometry geom) {
  static const Tensor kNoBias;
  const Tensor& b = bias ? tape.value(*bias) : kNoBias;
  Tensor out = ops::conv2d(tape.value(input), tape.value(kernel), b, geom);
  Var bias_var = bias.value_or(Var{});
  bool needs = any_grad(tape, {input, kernel, bias_var});
  return tape.record(std::move(out), needs, [=](Tape& t, const Tensor& g) {
    ops::ConvGradRequest req{t.requires_grad(input), t.requires_grad(kernel),
                             bias_var.valid() && t.requires_grad(bias_var)};
    ops::ConvGrads grads = ops::conv2d_backward(t.value(input), t.value(kernel), g, geom, req);
    if (req.input) t.accumulate(input, std::move(grads.input));
    if (req.kernel) t.accumulate(kernel, std::move(grads.kernel));
    if (req.bias) t.accumulate(bias_var, std::move(grads.bias));
  });
}

Var relu(Tape& tape, Var input) {
  return tape.record(ops::relu(tape.value(input)), tape.requires_grad(input),
                     [=](Tape& t, const Tensor& g) {
                       t.accumulate(input, ops::relu_backward(t.value(input), g));
                     });
}

Var maxpool2d(Tape& tape, Var input, int window, int stride) {
  ops::PoolResult pooled = ops::maxpool2d(tape.value(input), window, stride);
  bool needs = tape.requires_grad(input);
  Shape in_shape = tape.value(input).shape();
  std::vector<std::uint32_t> argmax = needs ? std::move(pooled.argmax) : std::vector<std::uint32_t>{};
  return tape.record(std::move(pooled.output), needs,
                     [=, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
                       t.accumulate(input, ops::maxpool2d_backward(in_shape, argmax, g));
                     });
}

Var linear(Tape& tape, Var input, Var weights) {
  Tensor out = ops::linear(tape.value(input), tape.value(weights));
  return tape.record(std::move(out), any_grad(tape, {input, weights}),
                     [=](Tape& t, const Tensor& g) {
                       ops::LinearGrads grads =
                           ops::linear_backward(t.value(input), t.value(weights), g);
                       t.accumulate(input, std::move(grads.input));
                       t.accumulate(weights, std::move(grads.weights));
                     });
}

Var add(Tape& tape, Var a, Var b) {
  Tensor out = tape.value(a) + tape.value(b);
  return tape.record(std::move(out), any_grad(tape, {a, b}), [=](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var scale(Tape& tape, Var a, double factor) {
  return tape.record(tape.value(a) * factor, tape.requires_grad(a),
                     [=](Tape& t, const Tensor& g) { t.accumulate(a, g * factor); });
}

Var sliding_sq_l2(Tape& tape, Var feature, Var templates) {
  Tensor out = ops::sliding_sq_l2(tape.value(feature), tape.value(templates));
  return tape.record(std::move(out), any_grad(tape, {feature, templates}),
                     [=](Tape& t, const Tensor& g) {
                       bool wf = t.requires_grad(feature), wt = t.requires_grad(templates);
                       ops::SlidingGrads grads = ops::sliding_sq_l2_backward(
                           t.value(feature), t.value(templates), g, wf, wt);
                       if (wf) t.accumulate(feature, std::move(grads.feature));
                       if (wt) t.accumulate(templates, std::move(grads.templates));
                     });
}

Var spatial_min(Tape& tape, Var maps) {
  ops::MinResult mins = ops::spatial_min(tape.value(maps));
  Shape in_shape = tape.value(maps).shape();
  return tape.record(std::move(mins.values), tape.requires_grad(maps),
                     [=, argmin = std::move(mins.argmin)](Tape& t, const Tensor& g) {
                       t.accumulate(maps, ops::spatial_min_backward(in_shape, argmin, g));
                     });
}

Var sum_squares(Tape& tape, Var a) {
  return scalar_var(tape, protofed::sum_squares(tape.value(a)), tape.requires_grad(a),
                    [=](Tape& t, const Tensor& g) { t.accumulate(a, t.value(a) * (2.0 * g[0])); });
}

Var abs_sum(Tape& tape, Var a) {
  double total = 0.0;
  for (double v : tape.value(a).data()) total += std::abs(v);
  return scalar_var(tape, total, tape.requires_grad(a), [=](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      grad[i] = x[i] > 0.0 ? g[0] : (x[i] < 0.0 ? -g[0] : 0.0);
    }
    t.accumulate(a, std::move(grad));
  });
}

Var sq_diff_sum(Tape& tape, Var a, const Tensor& reference) {
  require_same_shape(tape.value(a), reference, "sq_diff_sum");
  Tensor diff = tape.value(a) - reference;
  double total = protofed::sum_squares(diff);
  return scalar_var(tape, total, tape.requires_grad(a),
                    [=, diff = std::move(diff)](Tape& t, const Tensor& g) {
                      t.accumulate(a, diff * (2.0 * g[0]));
                    });
}

Var linear_combination(Tape& tape, std::span<const Var> terms, std::span<const double> coeffs) {
  if (terms.size() != coeffs.size()) throw ConfigError("linear_combination: size mismatch");
  double total = 0.0;
  bool needs = false;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    total += coeffs[k] * tape.value(terms[k]).item();
    needs = needs || tape.requires_grad(terms[k]);
  }
  std::vector<Var> ts(terms.begin(), terms.end());
  std::vector<double> cs(coeffs.begin(), coeffs.end());
  return scalar_var(tape, total, needs, [ts, cs](Tape& t, const Tensor& g) {
    for (std::size_t k = 0; k < ts.size(); ++k) t.accumulate(ts[k], Tensor::scalar(cs[k] * g[0]));
  });
}

Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2) throw ConfigError("cross_entropy expects B x C logits");
  const std::size_t B = z.dim(0), C = z.dim(1);
  if (labels.size() != B) {
    throw DataError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                    std::to_string(B));
  }
  Tensor probs(z.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw DataError("label " + std::to_string(y) + " at batch index " + std::to_string(b) +
                      " outside [0, " + std::to_string(C) + ")");
    }
    double zmax = z[b * C];
    for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[b * C + c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(z[b * C + c] - zmax);
    double log_denom = std::log(denom);
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] = std::exp(z[b * C + c] - zmax - log_denom);
    total += -(z[b * C + static_cast<std::size_t>(y)] - zmax - log_denom);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return scalar_var(tape, total / static_cast<double>(B), tape.requires_grad(logits),
                    [=, probs = std::move(probs)](Tape& t, const Tensor& g) {
                      Tensor grad = probs;
                      const double w = g[0] / static_cast<double>(B);
                      for (std::size_t b = 0; b < B; ++b) {
                        grad[b * C + static_cast<std::size_t>(ys[b])] -= 1.0;
                      }
                      grad *= w;
                      t.accumulate(logits, std::move(grad));
                    });
}

Var class_restricted_min(Tape& tape, Var values, std::span<const int> labels,
                         std::span<const int> prototype_class, bool correct, double cap) {
  const Tensor& v = tape.value(values);
  if (v.rank() != 2 || v.dim(1) != prototype_class.size()) {
    throw ConfigError("class_restricted_min: values " + shape_to_string(v.shape()) + " vs " +
                      std::to_string(prototype_class.size()) + " prototype classes");
  }
  const std::size_t B = v.dim(0), M = v.dim(1);
  if (labels.size() != B) throw DataError("class_restricted_min: label count mismatch");
  // Per-row chosen prototype, or M when the row contributes nothing (no
  // eligible prototype, or clipped at the cap).
  std::vector<std::size_t> chosen(B, M);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < M; ++j) {
      bool same = prototype_class[j] == labels[b];
      if (same != correct) continue;
      if (chosen[b] == M || v[b * M + j] < v[b * M + chosen[b]]) chosen[b] = j;
    }
    if (chosen[b] == M) continue;
    double d = v[b * M + chosen[b]];
    if (cap > 0.0 && d >= cap) {
      total += cap;
      chosen[b] = M;
    } else {
      total += d;
    }
  }
  return scalar_var(tape, total / static_cast<double>(B), tape.requires_grad(values),
                    [=, chosen = std::move(chosen)](Tape& t, const Tensor& g) {
                      Tensor grad(Shape{B, M}, 0.0);
                      const double w = g[0] / static_cast<double>(B);
                      for (std::size_t b = 0; b < B; ++b) {
                        if (chosen[b] != M) grad[b * M + chosen[b]] = w;
                      }
                      t.accumulate(values, std::move(grad));
                    });
}

}  // namespace protofed::ad

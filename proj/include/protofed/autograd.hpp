#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "protofed/ops.hpp"
#include "protofed/tensor.hpp"

// Reverse-mode differentiation over a linear tape. Nodes are appended in
// evaluation order, so insertion order is already topological and the
// backward sweep simply walks the tape in reverse. Gradient accumulation order
// is therefore fixed and results are bitwise reproducible.
namespace protofed::ad {

struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

class Tape;

// Receives the accumulated gradient of the node being processed.
using BackwardFn = std::function<void(Tape&, const Tensor&)>;

class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  // Empty tensor when no gradient reached the node.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Adds into the gradient of `v`; ignored for nodes that do not need one.
  void accumulate(Var v, Tensor g);

  // Seeds d(root)/d(root) = 1 and sweeps the tape backwards. `root` must hold
  // a single element.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// -- differentiable ops ------------------------------------------------------

Var conv2d(Tape& tape, Var input, Var kernel, std::optional<Var> bias, ops::ConvGeometry geom);
Var relu(Tape& tape, Var input);
Var maxpool2d(Tape& tape, Var input, int window, int stride);
Var linear(Tape& tape, Var input, Var weights);
Var add(Tape& tape, Var a, Var b);
Var scale(Tape& tape, Var a, double factor);
Var sliding_sq_l2(Tape& tape, Var feature, Var templates);
// Minimum over spatial axes: N x m x H x W -> N x m.
Var spatial_min(Tape& tape, Var maps);

// Scalar reductions.
Var sum_squares(Tape& tape, Var a);
// Sum of |a|; subgradient 0 at exactly 0.
Var abs_sum(Tape& tape, Var a);
// Sum of (a - reference)^2 with a fixed reference.
Var sq_diff_sum(Tape& tape, Var a, const Tensor& reference);
// sum_k coeffs[k] * terms[k] over scalar vars.
Var linear_combination(Tape& tape, std::span<const Var> terms, std::span<const double> coeffs);

// Mean over the batch of -log softmax(logits)[label]; logits B x C.
Var cross_entropy(Tape& tape, Var logits, std::span<const int> labels);

// Mean over the batch of min_j values[i, j] restricted to prototypes j whose
// class equals (correct) or differs from (!correct) labels[i]. Rows with no
// eligible prototype contribute 0. values is B x m.
Var class_restricted_min(Tape& tape, Var values, std::span<const int> labels,
                         std::span<const int> prototype_class, bool correct,
                         double cap = 0.0);

}  // namespace protofed::ad

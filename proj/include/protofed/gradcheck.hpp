#pragma once

#include <functional>
#include <string>
#include <vector>

#include "protofed/autograd.hpp"
#include "protofed/tensor.hpp"

namespace protofed {

// A scalar function of named parameters. When `grads` is non-null the
// function also writes its analytic gradient there (same layout as `point`).
using Objective = std::function<double(const NamedTensors& point, NamedTensors* grads)>;

// Builds an Objective from a tape expression: each named tensor becomes a
// gradient-requiring leaf, in order.
using TapeExpression = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
Objective tape_objective(TapeExpression expr);

// |a - n| / max(1e-8, |a| + |n|)
double relative_error(double analytic, double numeric);

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
  // Set when an evaluation produced a non-finite value.
  std::string diagnostic;
};

// Central differences (f(x+h) - f(x-h)) / 2h for every coordinate, compared
// against the analytic gradient.
GradCheckReport grad_check(const Objective& fn, const NamedTensors& point, double step,
                           double tolerance);

}  // namespace protofed

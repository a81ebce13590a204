#include "protofed/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace protofed {

Objective tape_objective(TapeExpression expr) {
  return [expr = std::move(expr)](const NamedTensors& point, NamedTensors* grads) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    leaves.reserve(point.size());
    for (const auto& [name, value] : point) leaves.push_back(tape.leaf(value, grads != nullptr));
    ad::Var out = expr(tape, leaves);
    double value = tape.value(out).item();
    if (grads) {
      tape.backward(out);
      *grads = NamedTensors();
      std::size_t k = 0;
      for (const auto& [name, v] : point) {
        const Tensor& g = tape.grad(leaves[k++]);
        grads->add(name, g.empty() ? Tensor(v.shape(), 0.0) : g);
      }
    }
    return value;
  };
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport grad_check(const Objective& fn, const NamedTensors& point, double step,
                           double tolerance) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
  GradCheckReport report;
  NamedTensors analytic;
  double f0 = fn(point, &analytic);
  if (!std::isfinite(f0)) {
    report.passed = false;
    report.diagnostic = "objective is not finite at the evaluation point";
    return report;
  }
  NamedTensors probe = point;
  for (auto& [name, tensor] : probe) {
    ParamCheck check;
    check.name = name;
    const Tensor& a = analytic.get(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double original = tensor[i];
      tensor[i] = original + step;
      double fp = fn(probe, nullptr);
      tensor[i] = original - step;
      double fm = fn(probe, nullptr);
      tensor[i] = original;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.passed = false;
        check.passed = false;
        report.diagnostic = "non-finite evaluation while perturbing '" + name + "' at index " +
                            std::to_string(i);
        break;
      }
      double numeric = (fp - fm) / (2.0 * step);
      double err = relative_error(a[i], numeric);
      if (i == 0 || err > check.max_rel_error) {
        check.max_rel_error = err;
        check.worst_index = i;
        check.worst_analytic = a[i];
        check.worst_numeric = numeric;
      }
    }
    check.passed = check.passed && check.max_rel_error <= tolerance;
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.passed = report.passed && check.passed;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace protofed

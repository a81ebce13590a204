#include "protofed/optim.hpp"

#include <cmath>

namespace protofed {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "adam") return OptimizerKind::Adam;
  if (text == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + text + "' (expected adam|sgd)");
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
}

void Optimizer::reset() {
  t_ = 0;
  state_.clear();
}

void Optimizer::step(NamedTensors& params, const NamedTensors& grads) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (auto& [name, p] : params) {
    const Tensor& g = grads.get(name);
    require_same_shape(p, g, "optimizer step");
    if (kind_ == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * g[i];
      continue;
    }
    if (t_ < 1) throw ConfigError("Optimizer::begin_step() must precede an Adam step");
    auto [it, inserted] = state_.try_emplace(name);
    Moments& s = it->second;
    if (inserted) {
      s.m = Tensor(p.shape(), 0.0);
      s.v = Tensor(p.shape(), 0.0);
    }
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace protofed

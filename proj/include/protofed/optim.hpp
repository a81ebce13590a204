#pragma once

#include <map>
#include <string>

#include "protofed/tensor.hpp"

namespace protofed {

enum class OptimizerKind { Adam, Sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8, bias-corrected) or plain SGD.
// State is keyed by tensor name, so one optimizer can drive several groups
// as long as names are unique.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate);

  void step(NamedTensors& params, const NamedTensors& grads);
  // Advances the shared Adam time step; call once per batch before step().
  void begin_step() { ++t_; }
  void reset();

  OptimizerKind kind() const { return kind_; }
  double learning_rate() const { return lr_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  OptimizerKind kind_;
  double lr_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace protofed

#include "protofed/loss.hpp"

#include <cmath>

#include "protofed/log.hpp"

namespace protofed {

void LossWeights::validate() const {
  const double all[] = {beta, lambda_clst, lambda_sep, gamma, mu1, mu2, sep_cap};
  for (double v : all) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError("loss coefficients must be finite and >= 0");
    }
  }
}

namespace {

void require_prototype_set(std::span<const int> prototype_classes, std::span<const int> labels,
                           bool correct) {
  for (int y : labels) {
    bool found = false;
    for (int c : prototype_classes) {
      if ((c == y) == correct) {
        found = true;
        break;
      }
    }
    if (!found && correct) {
      throw ConfigError("class " + std::to_string(y) + " has no prototypes");
    }
    if (!found && !correct) {
      log::warn_once("sep-single-class",
                     "separation loss undefined without wrong-class prototypes; using 0");
    }
  }
}

ad::Var group_sq_diff(ad::Tape& tape, std::span<const ad::Var> vars,
                      const std::vector<std::string>& names, const NamedTensors& local_layout,
                      const NamedTensors& global) {
  std::vector<ad::Var> terms;
  std::vector<double> ones;
  for (const auto& [name, reference] : global) {
    std::size_t k = 0;
    while (k < names.size() && names[k] != name) ++k;
    if (k == names.size()) {
      throw ProtocolError("global reference '" + name + "' has no local counterpart");
    }
    if (local_layout.get(name).shape() != reference.shape()) {
      throw ProtocolError("global reference '" + name + "' shape " +
                          shape_to_string(reference.shape()) + " differs from local " +
                          shape_to_string(local_layout.get(name).shape()));
    }
    terms.push_back(ad::sq_diff_sum(tape, vars[k], reference));
    ones.push_back(1.0);
  }
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  return ad::linear_combination(tape, terms, ones);
}

}  // namespace

LossVars local_loss(ad::Tape& tape, const ForwardVars& fwd, const ModelVars& vars,
                    const ParamGroups& params, std::span<const int> labels,
                    std::span<const int> prototype_classes, const GlobalReference& globals,
                    const LossWeights& weights) {
  require_prototype_set(prototype_classes, labels, true);
  require_prototype_set(prototype_classes, labels, false);

  LossVars out;
  out.ce = ad::cross_entropy(tape, fwd.logits, labels);
  out.clst = ad::class_restricted_min(tape, fwd.min_distances, labels, prototype_classes, true);
  out.sep = ad::class_restricted_min(tape, fwd.min_distances, labels, prototype_classes, false,
                                     weights.sep_cap);
  out.l1 = ad::abs_sum(tape, vars.head);
  if (weights.l1_on_prototypes) {
    ad::Var parts[] = {out.l1, ad::abs_sum(tape, vars.prototypes)};
    const double ones[] = {1.0, 1.0};
    out.l1 = ad::linear_combination(tape, parts, ones);
  }

  std::vector<ad::Var> adapter_terms;
  for (std::size_t b = 0; b < vars.adapter_down.size(); ++b) {
    adapter_terms.push_back(ad::sum_squares(tape, vars.adapter_down[b]));
    adapter_terms.push_back(ad::sum_squares(tape, vars.adapter_up[b]));
  }
  std::vector<double> ones(adapter_terms.size(), 1.0);
  out.adapter_l2 = ad::linear_combination(tape, adapter_terms, ones);

  std::vector<ad::Var> prox_terms;
  std::vector<double> prox_coeffs;
  if (globals.alpha) {
    std::vector<ad::Var> alpha_vars;
    std::vector<std::string> alpha_names;
    for (std::size_t b = 0; b < vars.adapter_down.size(); ++b) {
      alpha_vars.push_back(vars.adapter_down[b]);
      alpha_names.push_back(names::adapter_down(b));
      alpha_vars.push_back(vars.adapter_up[b]);
      alpha_names.push_back(names::adapter_up(b));
    }
    prox_terms.push_back(group_sq_diff(tape, alpha_vars, alpha_names, params.alpha, *globals.alpha));
    prox_coeffs.push_back(0.5 * weights.mu1);
  }
  if (globals.phi) {
    const ad::Var phi_vars[] = {vars.prototypes, vars.head};
    const std::vector<std::string> phi_names{names::kPrototypes, names::kHead};
    prox_terms.push_back(group_sq_diff(tape, phi_vars, phi_names, params.phi, *globals.phi));
    prox_coeffs.push_back(0.5 * weights.mu2);
  }
  out.prox = ad::linear_combination(tape, prox_terms, prox_coeffs);

  const ad::Var terms[] = {out.ce, out.clst, out.sep, out.l1, out.adapter_l2, out.prox};
  const double coeffs[] = {1.0, weights.lambda_clst, -weights.lambda_sep, weights.gamma,
                           weights.beta, 1.0};
  out.total = ad::linear_combination(tape, terms, coeffs);
  return out;
}

LossBreakdown read_breakdown(const ad::Tape& tape, const LossVars& vars) {
  LossBreakdown b;
  b.ce = tape.value(vars.ce).item();
  b.clst = tape.value(vars.clst).item();
  b.sep = tape.value(vars.sep).item();
  b.l1 = tape.value(vars.l1).item();
  b.adapter_l2 = tape.value(vars.adapter_l2).item();
  b.prox = tape.value(vars.prox).item();
  b.total = tape.value(vars.total).item();
  return b;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels) {
  ad::Tape tape;
  return tape.value(ad::cross_entropy(tape, tape.constant(logits), labels)).item();
}

namespace {
Tensor spatial_mins(const Tensor& distance_maps) { return ops::spatial_min(distance_maps).values; }
}  // namespace

double cluster_loss(const Tensor& distance_maps, std::span<const int> labels,
                    const PrototypeLayer& layer) {
  require_prototype_set(layer.classes, labels, true);
  ad::Tape tape;
  ad::Var mins = tape.constant(spatial_mins(distance_maps));
  return tape.value(ad::class_restricted_min(tape, mins, labels, layer.classes, true)).item();
}

double separation_loss(const Tensor& distance_maps, std::span<const int> labels,
                       const PrototypeLayer& layer, double cap) {
  require_prototype_set(layer.classes, labels, false);
  ad::Tape tape;
  ad::Var mins = tape.constant(spatial_mins(distance_maps));
  return tape.value(ad::class_restricted_min(tape, mins, labels, layer.classes, false, cap)).item();
}

double adapter_l2(const NamedTensors& alpha) {
  double total = 0.0;
  for (const auto& [name, t] : alpha) total += sum_squares(t);
  return total;
}

double head_l1(const ClassificationHead& head) {
  double total = 0.0;
  for (double v : head.weights.data()) total += std::abs(v);
  return total;
}

double proximal(const NamedTensors& alpha_local, const NamedTensors& phi_local,
                const NamedTensors& alpha_global, const NamedTensors& phi_global, double mu1,
                double mu2) {
  auto group = [](const NamedTensors& local, const NamedTensors& global) {
    if (!local.same_layout(global)) {
      throw ProtocolError("proximal: local and global parameter groups differ in layout");
    }
    double total = 0.0;
    auto g = global.begin();
    for (const auto& [name, t] : local) {
      total += sum_squares(t - (g++)->second);
    }
    return total;
  };
  return 0.5 * mu1 * group(alpha_local, alpha_global) + 0.5 * mu2 * group(phi_local, phi_global);
}

LossBreakdown local_loss(const ModelOutput& outputs, std::span<const int> labels,
                         const ParamGroups& params, const ModelConfig& config,
                         const GlobalReference& globals, const LossWeights& weights) {
  ad::Tape tape;
  ModelVars vars = bind_params(tape, params, Trainable::None);
  ForwardVars fwd;
  fwd.logits = tape.constant(outputs.logits);
  fwd.distance_maps = tape.constant(outputs.distance_maps);
  fwd.min_distances = tape.constant(spatial_mins(outputs.distance_maps));
  fwd.scores = tape.constant(outputs.scores);
  auto classes = config.prototype_classes();
  return read_breakdown(tape, local_loss(tape, fwd, vars, params, labels, classes, globals, weights));
}

}  // namespace protofed

#pragma once

#include <span>
#include <vector>

#include "protofed/autograd.hpp"
#include "protofed/model.hpp"

namespace protofed {

struct LossWeights {
  double beta = 1e-4;         // adapter l2
  double lambda_clst = 0.8;   // cluster
  double lambda_sep = 0.08;   // separation (subtracted)
  double gamma = 1e-4;        // head l1
  double mu1 = 0.01;          // adapter proximal
  double mu2 = 0.01;          // prototype/head proximal
  // Apply the l1 penalty to the prototype tensor as well as the head.
  bool l1_on_prototypes = false;
  // When > 0, each sample's separation distance is clipped at this value.
  double sep_cap = 0.0;

  void validate() const;
};

// total = ce + (lambda_clst*clst - lambda_sep*sep + gamma*l1) + beta*adapter_l2 + prox
struct LossBreakdown {
  double ce = 0.0;
  double clst = 0.0;
  double sep = 0.0;
  double l1 = 0.0;
  double adapter_l2 = 0.0;
  double prox = 0.0;
  double total = 0.0;
};

// Global references for the proximal term. A null group carries no
// reference and adds no penalty (used when that group is not communicated).
struct GlobalReference {
  const NamedTensors* alpha = nullptr;
  const NamedTensors* phi = nullptr;
};

// -- value-level terms ------------------------------------------------------

double cross_entropy(const Tensor& logits, std::span<const int> labels);
double cluster_loss(const Tensor& distance_maps, std::span<const int> labels,
                    const PrototypeLayer& layer);
double separation_loss(const Tensor& distance_maps, std::span<const int> labels,
                       const PrototypeLayer& layer, double cap = 0.0);
double adapter_l2(const NamedTensors& alpha);
double head_l1(const ClassificationHead& head);
double proximal(const NamedTensors& alpha_local, const NamedTensors& phi_local,
                const NamedTensors& alpha_global, const NamedTensors& phi_global, double mu1,
                double mu2);

LossBreakdown local_loss(const ModelOutput& outputs, std::span<const int> labels,
                         const ParamGroups& params, const ModelConfig& config,
                         const GlobalReference& globals, const LossWeights& weights);

// -- tape ---------------------------------------------------------------------

struct LossVars {
  ad::Var ce, clst, sep, l1, adapter_l2, prox, total;
};

LossVars local_loss(ad::Tape& tape, const ForwardVars& fwd, const ModelVars& vars,
                    const ParamGroups& params, std::span<const int> labels,
                    std::span<const int> prototype_classes, const GlobalReference& globals,
                    const LossWeights& weights);

LossBreakdown read_breakdown(const ad::Tape& tape, const LossVars& vars);

}  // namespace protofed

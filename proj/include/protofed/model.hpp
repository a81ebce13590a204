#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protofed/autograd.hpp"
#include "protofed/tensor.hpp"

namespace protofed {

enum class FreezeMode { FrozenRandom, WarmupPretrained };

std::string to_string(FreezeMode mode);
FreezeMode parse_freeze_mode(const std::string& text);

// Plain CNN stand-in for a pretrained backbone: each block is
// 3x3 conv (padding 1) + ReLU + 2x2 max-pool. The last block skips the pool
// unless pool_last_block is set, which keeps the prototype maps finer.
struct BackboneConfig {
  std::size_t input_channels = 1;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::vector<std::size_t> channels{8, 16, 32, 64};
  bool pool_last_block = false;
  // Subtracted from every input pixel before the first block.
  double input_offset = 0.5;
  FreezeMode freeze_mode = FreezeMode::WarmupPretrained;
  // Central pretraining before freezing (warmup-pretrained mode only).
  std::size_t warmup_steps = 300;
  double warmup_learning_rate = 1e-3;
  std::size_t warmup_samples = 400;

  std::size_t num_blocks() const { return channels.size(); }
  bool pools(std::size_t block) const { return block + 1 < num_blocks() || pool_last_block; }
};

struct ModelConfig {
  BackboneConfig backbone;
  // Adapter bottleneck width r = max(1, D / adapter_reduction), always < D.
  std::size_t adapter_reduction = 4;
  std::size_t num_classes = 2;
  std::size_t prototypes_per_class = 5;
  std::size_t prototype_height = 1;
  std::size_t prototype_width = 1;

  void validate() const;
  std::size_t num_prototypes() const { return num_classes * prototypes_per_class; }
  std::size_t bottleneck(std::size_t depth) const;
  // D x H x W of the final feature map z.
  Shape feature_shape() const;
  // Spatial extents of the distance maps.
  std::size_t map_height() const;
  std::size_t map_width() const;
  // Class identity of each prototype (contiguous blocks of prototypes_per_class).
  std::vector<int> prototype_classes() const;
};

// h' = h + relu(h * W_down) * W_up with 1x1 convolutions.
struct AdapterModule {
  Tensor down;  // r x D x 1 x 1
  Tensor up;    // D x r x 1 x 1
  std::size_t depth() const { return down.dim(1); }
  std::size_t bottleneck() const { return down.dim(0); }
};

struct PrototypeLayer {
  Tensor prototypes;  // m x D x h x w
  std::vector<int> classes;
  std::size_t count() const { return prototypes.dim(0); }
  std::size_t count_for_class(int c) const;
};

// Prototype-to-class weights, m x C, no bias.
struct ClassificationHead {
  Tensor weights;
};

// omega: frozen backbone; alpha: adapters; phi: prototypes and head.
struct ParamGroups {
  NamedTensors omega;
  NamedTensors alpha;
  NamedTensors phi;

  AdapterModule adapter(std::size_t block) const;
  PrototypeLayer prototype_layer(const ModelConfig& config) const;
  ClassificationHead head() const;

  std::size_t numel() const { return omega.numel() + alpha.numel() + phi.numel(); }
  bool identical(const ParamGroups& other) const;
};

namespace names {
std::string conv_weight(std::size_t block);
std::string conv_bias(std::size_t block);
std::string adapter_down(std::size_t block);
std::string adapter_up(std::size_t block);
inline const std::string kPrototypes = "prototypes";
inline const std::string kHead = "head";
}  // namespace names

// Deterministic initialization: He-uniform backbone and W_down, zero W_up
// (every adapter starts as the identity), prototypes uniform in [0, 1),
// head +1 for a prototype's own class and -0.5 elsewhere.
ParamGroups init_params(const ModelConfig& config, std::uint64_t seed);

Tensor adapter_forward(const Tensor& h, const AdapterModule& adapter);
Tensor backbone_forward(const Tensor& x, const ParamGroups& params, const ModelConfig& config,
                        bool use_adapters = true);

struct Similarities {
  Tensor distance_maps;  // N x m x H' x W'
  Tensor scores;         // N x m, score_j = -min d_j
};
Similarities prototype_similarities(const Tensor& z, const PrototypeLayer& layer);
Tensor head_logits(const Tensor& scores, const ClassificationHead& head);

struct ModelOutput {
  Tensor logits;
  Tensor distance_maps;
  Tensor scores;
};
ModelOutput model_forward(const Tensor& x, const ParamGroups& params, const ModelConfig& config,
                          bool use_adapters = true);

// Argmax of each logit row (first maximum on ties).
std::vector<int> predict(const Tensor& logits);

// -- tape versions ------------------------------------------------------------

enum class Trainable { None, AdaptersAndPrototypes, All };

struct ModelVars {
  std::vector<ad::Var> conv_weight, conv_bias, adapter_down, adapter_up;
  ad::Var prototypes, head;
};

ModelVars bind_params(ad::Tape& tape, const ParamGroups& params, Trainable trainable);

struct ForwardVars {
  ad::Var features;
  ad::Var distance_maps;
  ad::Var min_distances;  // N x m
  ad::Var scores;         // N x m
  ad::Var logits;
};

ad::Var adapter_forward(ad::Tape& tape, ad::Var h, ad::Var down, ad::Var up);
ForwardVars forward(ad::Tape& tape, const ModelVars& vars, ad::Var x, const ModelConfig& config,
                    bool use_adapters = true);

// Gradients of the bound leaves, packed like `params` (zeros where no
// gradient reached a tensor).
ParamGroups collect_grads(const ad::Tape& tape, const ModelVars& vars, const ParamGroups& params);

// -- checkpoint file ---------------------------------------------------------
//
// Layout (little-endian): "PFEDCKPT", u32 version, u32 group count, then per
// group a length-prefixed name and u32 tensor count, then per tensor a
// length-prefixed name, u32 rank, u64 extents, f64 elements.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamGroups& params);
ParamGroups decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamGroups& params);
ParamGroups load_checkpoint(const std::filesystem::path& path);
// Throws ConfigError when the checkpoint's tensors do not match the config.
void require_compatible(const ParamGroups& params, const ModelConfig& config);

}  // namespace protofed

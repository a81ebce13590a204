#include "protofed/model.hpp"

#include <cmath>

#include "protofed/binary_io.hpp"
#include "protofed/random.hpp"

namespace protofed {

std::string to_string(FreezeMode mode) {
  return mode == FreezeMode::FrozenRandom ? "frozen-random" : "warmup-pretrained";
}

FreezeMode parse_freeze_mode(const std::string& text) {
  if (text == "frozen-random") return FreezeMode::FrozenRandom;
  if (text == "warmup-pretrained") return FreezeMode::WarmupPretrained;
  throw ConfigError("unknown freeze mode '" + text + "' (expected frozen-random|warmup-pretrained)");
}

void ModelConfig::validate() const {
  const auto& bb = backbone;
  if (bb.num_blocks() < 1) throw ConfigError("backbone needs at least one block");
  if (bb.input_channels < 1 || bb.input_height < 1 || bb.input_width < 1) {
    throw ConfigError("input extents must be positive");
  }
  for (auto c : bb.channels) {
    if (c < 2) throw ConfigError("block channel counts must be >= 2 so that the adapter bottleneck r < D");
  }
  if (adapter_reduction < 2) throw ConfigError("adapter_reduction must be >= 2");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (prototypes_per_class < 1) throw ConfigError("every class needs at least one prototype");
  if (prototype_height < 1 || prototype_width < 1) throw ConfigError("prototype extents must be positive");
  std::size_t h = bb.input_height, w = bb.input_width;
  for (std::size_t b = 0; b < bb.num_blocks(); ++b) {
    if (!bb.pools(b)) continue;
    if (h < 2 || w < 2) {
      throw ConfigError("input " + std::to_string(bb.input_height) + "x" +
                        std::to_string(bb.input_width) + " too small for " +
                        std::to_string(bb.num_blocks()) + " pooling blocks");
    }
    h /= 2;
    w /= 2;
  }
  if (prototype_height > h || prototype_width > w) {
    throw ConfigError("prototype " + std::to_string(prototype_height) + "x" +
                      std::to_string(prototype_width) + " exceeds feature map " +
                      std::to_string(h) + "x" + std::to_string(w));
  }
}

std::size_t ModelConfig::bottleneck(std::size_t depth) const {
  std::size_t r = std::max<std::size_t>(1, depth / adapter_reduction);
  return std::min(r, depth - 1);
}

Shape ModelConfig::feature_shape() const {
  std::size_t h = backbone.input_height, w = backbone.input_width;
  for (std::size_t b = 0; b < backbone.num_blocks(); ++b) {
    if (!backbone.pools(b)) continue;
    h /= 2;
    w /= 2;
  }
  return {backbone.channels.back(), h, w};
}

std::size_t ModelConfig::map_height() const { return feature_shape()[1] - prototype_height + 1; }
std::size_t ModelConfig::map_width() const { return feature_shape()[2] - prototype_width + 1; }

std::vector<int> ModelConfig::prototype_classes() const {
  std::vector<int> classes(num_prototypes());
  for (std::size_t j = 0; j < classes.size(); ++j) {
    classes[j] = static_cast<int>(j / prototypes_per_class);
  }
  return classes;
}

std::size_t PrototypeLayer::count_for_class(int c) const {
  std::size_t n = 0;
  for (int k : classes) n += k == c ? 1 : 0;
  return n;
}

namespace names {
std::string conv_weight(std::size_t block) { return "block" + std::to_string(block + 1) + ".weight"; }
std::string conv_bias(std::size_t block) { return "block" + std::to_string(block + 1) + ".bias"; }
std::string adapter_down(std::size_t block) { return "adapter" + std::to_string(block + 1) + ".down"; }
std::string adapter_up(std::size_t block) { return "adapter" + std::to_string(block + 1) + ".up"; }
}  // namespace names

AdapterModule ParamGroups::adapter(std::size_t block) const {
  return {alpha.get(names::adapter_down(block)), alpha.get(names::adapter_up(block))};
}

PrototypeLayer ParamGroups::prototype_layer(const ModelConfig& config) const {
  return {phi.get(names::kPrototypes), config.prototype_classes()};
}

ClassificationHead ParamGroups::head() const { return {phi.get(names::kHead)}; }

bool ParamGroups::identical(const ParamGroups& other) const {
  return omega.identical(other.omega) && alpha.identical(other.alpha) && phi.identical(other.phi);
}

namespace {

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = uniform(rng, -bound, bound);
  return t;
}

}  // namespace

ParamGroups init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParamGroups params;
  Rng backbone_rng(derive_seed(seed, {1}));
  Rng adapter_rng(derive_seed(seed, {2}));
  Rng proto_rng(derive_seed(seed, {3}));

  std::size_t in_ch = config.backbone.input_channels;
  for (std::size_t b = 0; b < config.backbone.num_blocks(); ++b) {
    const std::size_t out_ch = config.backbone.channels[b];
    params.omega.add(names::conv_weight(b), he_uniform({out_ch, in_ch, 3, 3}, in_ch * 9, backbone_rng));
    params.omega.add(names::conv_bias(b), Tensor(Shape{out_ch}, 0.0));
    const std::size_t r = config.bottleneck(out_ch);
    params.alpha.add(names::adapter_down(b), he_uniform({r, out_ch, 1, 1}, out_ch, adapter_rng));
    params.alpha.add(names::adapter_up(b), Tensor(Shape{out_ch, r, 1, 1}, 0.0));
    in_ch = out_ch;
  }

  const std::size_t m = config.num_prototypes(), C = config.num_classes;
  Tensor protos({m, in_ch, config.prototype_height, config.prototype_width});
  for (auto& v : protos.data()) v = uniform(proto_rng, 0.0, 1.0);
  params.phi.add(names::kPrototypes, std::move(protos));

  Tensor head({m, C}, -0.5);
  auto classes = config.prototype_classes();
  for (std::size_t j = 0; j < m; ++j) head[j * C + static_cast<std::size_t>(classes[j])] = 1.0;
  params.phi.add(names::kHead, std::move(head));
  return params;
}

namespace {

void check_input(const Tensor& x, const ModelConfig& config) {
  const auto& bb = config.backbone;
  if (x.rank() != 4 || x.dim(1) != bb.input_channels || x.dim(2) != bb.input_height ||
      x.dim(3) != bb.input_width) {
    throw ConfigError("input " + shape_to_string(x.shape()) + " does not match configured N x " +
                      std::to_string(bb.input_channels) + " x " + std::to_string(bb.input_height) +
                      " x " + std::to_string(bb.input_width));
  }
}

void check_adapter(std::size_t depth, const Tensor& down, const Tensor& up) {
  if (down.rank() != 4 || up.rank() != 4 || down.dim(1) != depth || up.dim(0) != depth ||
      up.dim(1) != down.dim(0)) {
    throw ConfigError("adapter " + shape_to_string(down.shape()) + "/" +
                      shape_to_string(up.shape()) + " does not fit feature depth " +
                      std::to_string(depth));
  }
}

}  // namespace

ad::Var adapter_forward(ad::Tape& tape, ad::Var h, ad::Var down, ad::Var up) {
  check_adapter(tape.value(h).dim(1), tape.value(down), tape.value(up));
  ad::Var squeezed = ad::relu(tape, ad::conv2d(tape, h, down, std::nullopt, {1, 0}));
  ad::Var expanded = ad::conv2d(tape, squeezed, up, std::nullopt, {1, 0});
  return ad::add(tape, h, expanded);
}

ModelVars bind_params(ad::Tape& tape, const ParamGroups& params, Trainable trainable) {
  const bool train_omega = trainable == Trainable::All;
  const bool train_rest = trainable != Trainable::None;
  ModelVars vars;
  const std::size_t blocks = params.alpha.size() / 2;
  for (std::size_t b = 0; b < blocks; ++b) {
    vars.conv_weight.push_back(tape.leaf(params.omega.get(names::conv_weight(b)), train_omega));
    vars.conv_bias.push_back(tape.leaf(params.omega.get(names::conv_bias(b)), train_omega));
    vars.adapter_down.push_back(tape.leaf(params.alpha.get(names::adapter_down(b)), train_rest));
    vars.adapter_up.push_back(tape.leaf(params.alpha.get(names::adapter_up(b)), train_rest));
  }
  vars.prototypes = tape.leaf(params.phi.get(names::kPrototypes), train_rest);
  vars.head = tape.leaf(params.phi.get(names::kHead), train_rest);
  return vars;
}

ForwardVars forward(ad::Tape& tape, const ModelVars& vars, ad::Var x, const ModelConfig& config,
                    bool use_adapters) {
  check_input(tape.value(x), config);
  if (vars.conv_weight.size() != config.backbone.num_blocks()) {
    throw ConfigError("parameter set has " + std::to_string(vars.conv_weight.size()) +
                      " blocks, config expects " + std::to_string(config.backbone.num_blocks()));
  }
  ForwardVars out;
  ad::Var h = x;
  if (config.backbone.input_offset != 0.0) {
    h = ad::add(tape, h, tape.constant(Tensor(tape.value(x).shape(), -config.backbone.input_offset)));
  }
  for (std::size_t b = 0; b < vars.conv_weight.size(); ++b) {
    h = ad::conv2d(tape, h, vars.conv_weight[b], vars.conv_bias[b], {1, 1});
    h = ad::relu(tape, h);
    if (config.backbone.pools(b)) h = ad::maxpool2d(tape, h, 2, 2);
    if (use_adapters) h = adapter_forward(tape, h, vars.adapter_down[b], vars.adapter_up[b]);
  }
  out.features = h;
  out.distance_maps = ad::sliding_sq_l2(tape, h, vars.prototypes);
  out.min_distances = ad::spatial_min(tape, out.distance_maps);
  out.scores = ad::scale(tape, out.min_distances, -1.0);
  out.logits = ad::linear(tape, out.scores, vars.head);
  return out;
}

ParamGroups collect_grads(const ad::Tape& tape, const ModelVars& vars, const ParamGroups& params) {
  auto grab = [&](ad::Var v, const Tensor& like) {
    const Tensor& g = tape.grad(v);
    return g.empty() ? Tensor(like.shape(), 0.0) : g;
  };
  ParamGroups grads;
  for (std::size_t b = 0; b < vars.conv_weight.size(); ++b) {
    grads.omega.add(names::conv_weight(b), grab(vars.conv_weight[b], params.omega.get(names::conv_weight(b))));
    grads.omega.add(names::conv_bias(b), grab(vars.conv_bias[b], params.omega.get(names::conv_bias(b))));
    grads.alpha.add(names::adapter_down(b), grab(vars.adapter_down[b], params.alpha.get(names::adapter_down(b))));
    grads.alpha.add(names::adapter_up(b), grab(vars.adapter_up[b], params.alpha.get(names::adapter_up(b))));
  }
  grads.phi.add(names::kPrototypes, grab(vars.prototypes, params.phi.get(names::kPrototypes)));
  grads.phi.add(names::kHead, grab(vars.head, params.phi.get(names::kHead)));
  return grads;
}

Tensor adapter_forward(const Tensor& h, const AdapterModule& adapter) {
  ad::Tape tape;
  ad::Var out = adapter_forward(tape, tape.constant(h), tape.constant(adapter.down),
                                tape.constant(adapter.up));
  return tape.value(out);
}

Tensor backbone_forward(const Tensor& x, const ParamGroups& params, const ModelConfig& config,
                        bool use_adapters) {
  ad::Tape tape;
  ModelVars vars = bind_params(tape, params, Trainable::None);
  return tape.value(forward(tape, vars, tape.constant(x), config, use_adapters).features);
}

Similarities prototype_similarities(const Tensor& z, const PrototypeLayer& layer) {
  Similarities s;
  s.distance_maps = ops::sliding_sq_l2(z, layer.prototypes);
  s.scores = ops::spatial_min(s.distance_maps).values * -1.0;
  return s;
}

Tensor head_logits(const Tensor& scores, const ClassificationHead& head) {
  return ops::linear(scores, head.weights);
}

ModelOutput model_forward(const Tensor& x, const ParamGroups& params, const ModelConfig& config,
                          bool use_adapters) {
  ad::Tape tape;
  ModelVars vars = bind_params(tape, params, Trainable::None);
  ForwardVars f = forward(tape, vars, tape.constant(x), config, use_adapters);
  return {tape.value(f.logits), tape.value(f.distance_maps), tape.value(f.scores)};
}

std::vector<int> predict(const Tensor& logits) {
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (logits[b * C + c] > logits[b * C + best]) best = c;
    }
    out[b] = static_cast<int>(best);
  }
  return out;
}

namespace {
constexpr char kCheckpointMagic[8] = {'P', 'F', 'E', 'D', 'C', 'K', 'P', 'T'};
const char* const kGroupNames[3] = {"omega", "alpha", "phi"};
}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamGroups& params) {
  bin::Writer w;
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.uint(kCheckpointVersion);
  w.uint(std::uint32_t{3});
  const NamedTensors* groups[3] = {&params.omega, &params.alpha, &params.phi};
  for (int g = 0; g < 3; ++g) {
    w.str(kGroupNames[g]);
    w.uint(static_cast<std::uint32_t>(groups[g]->size()));
    for (const auto& [name, t] : *groups[g]) w.tensor(name, t);
  }
  return w.take();
}

ParamGroups decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes);
  r.expect(kCheckpointMagic, sizeof(kCheckpointMagic), "checkpoint magic");
  const std::size_t version_at = r.offset();
  auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::size_t count_at = r.offset();
  if (r.uint<std::uint32_t>() != 3) throw FormatError("checkpoint must hold 3 groups", count_at);
  ParamGroups params;
  NamedTensors* groups[3] = {&params.omega, &params.alpha, &params.phi};
  for (int g = 0; g < 3; ++g) {
    const std::size_t name_at = r.offset();
    if (r.str() != kGroupNames[g]) {
      throw FormatError(std::string("expected group '") + kGroupNames[g] + "'", name_at);
    }
    auto n = r.uint<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto [name, t] = r.tensor();
      groups[g]->add(std::move(name), std::move(t));
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParamGroups& params) {
  bin::write_file(path, encode_checkpoint(params));
}

ParamGroups load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(bin::read_file(path));
}

void require_compatible(const ParamGroups& params, const ModelConfig& config) {
  ParamGroups reference = init_params(config, 0);
  auto check = [](const NamedTensors& got, const NamedTensors& want, const char* group) {
    if (!got.same_layout(want)) {
      throw ConfigError(std::string("checkpoint group '") + group +
                        "' does not match the model configuration");
    }
  };
  check(params.omega, reference.omega, "omega");
  check(params.alpha, reference.alpha, "alpha");
  check(params.phi, reference.phi, "phi");
}

}  // namespace protofed

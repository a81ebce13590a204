#include "protofed/fed.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <thread>

#include "protofed/binary_io.hpp"
#include "protofed/log.hpp"
#include "protofed/ops.hpp"

namespace protofed {

void FedConfig::validate() const {
  if (num_clients < 1) throw ConfigError("need at least one client");
  if (rounds > 100000) throw ConfigError("rounds out of range");
  if (local_epochs < 1) throw ConfigError("local epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be > 0");
  }
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!communicate_adapters && !communicate_prototypes) {
    throw ConfigError("at least one of communicate_adapters / communicate_prototypes must be on");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
}

std::vector<std::string> FedConfig::communicated_phi() const {
  if (!communicate_prototypes) return {};
  if (!communicate_head) return {names::kPrototypes};
  return {names::kPrototypes, names::kHead};
}

const std::vector<Variant>& known_variants() {
  static const std::vector<Variant> variants = {
      {"fedavg", true, true, false, false, false},
      {"fedprox", true, true, true, false, true},
      {"fedadapter", true, false, true, true, false},
      {"fedadapter_noprox", true, false, false, true, false},
      {"prototypes_only", false, true, true, true, false},
      {"ours", true, true, true, true, false},
  };
  return variants;
}

const Variant& find_variant(const std::string& name) {
  for (const auto& v : known_variants()) {
    if (v.name == name) return v;
  }
  std::string list;
  for (const auto& v : known_variants()) list += (list.empty() ? "" : "|") + v.name;
  throw ConfigError("unknown variant '" + name + "' (expected " + list + ")");
}

std::vector<std::string> default_variant_grid() {
  return {"fedavg", "fedprox", "fedadapter", "prototypes_only", "ours"};
}

void apply_variant(const Variant& variant, FedConfig& fed, LossWeights& weights) {
  fed.communicate_adapters = variant.communicate_adapters;
  fed.communicate_prototypes = variant.communicate_prototypes;
  fed.use_prox = variant.use_prox;
  if (!variant.adapter_l2) weights.beta = 0.0;
  if (variant.shared_mu) weights.mu2 = weights.mu1;
}

bool RoundPayload::identical(const RoundPayload& other) const {
  auto same = [](const std::optional<NamedTensors>& a, const std::optional<NamedTensors>& b) {
    return a.has_value() == b.has_value() && (!a || a->identical(*b));
  };
  return client == other.client && round == other.round && samples == other.samples &&
         same(alpha, other.alpha) && same(phi, other.phi);
}

namespace {

constexpr char kPayloadMagic[4] = {'P', 'F', 'P', 'L'};
constexpr std::uint32_t kFlagAdapters = 1u << 0;
constexpr std::uint32_t kFlagPrototypes = 1u << 1;

NamedTensors subset(const NamedTensors& group, const std::vector<std::string>& keep) {
  NamedTensors out;
  for (const auto& name : keep) out.add(name, group.get(name));
  return out;
}

}  // namespace

std::vector<std::uint8_t> serialize_payload(const RoundPayload& payload) {
  bin::Writer w;
  w.bytes(kPayloadMagic, 4);
  w.uint<std::uint32_t>(kPayloadVersion);
  w.uint<std::uint32_t>(payload.client);
  w.uint<std::uint32_t>(payload.round);
  w.uint<std::uint64_t>(payload.samples);
  std::uint32_t flags = 0;
  if (payload.alpha) flags |= kFlagAdapters;
  if (payload.phi) flags |= kFlagPrototypes;
  w.uint<std::uint32_t>(flags);
  for (const auto* group : {&payload.alpha, &payload.phi}) {
    if (!*group) continue;
    w.uint<std::uint32_t>(static_cast<std::uint32_t>((*group)->size()));
    for (const auto& [name, t] : **group) w.tensor(name, t);
  }
  return w.take();
}

RoundPayload deserialize_payload(const std::vector<std::uint8_t>& bytes) {
  bin::Reader r(bytes);
  try {
    r.expect(kPayloadMagic, 4, "payload magic");
    const std::size_t version_at = r.offset();
    const auto version = r.uint<std::uint32_t>();
    if (version != kPayloadVersion) {
      throw ProtocolError("unsupported payload version " + std::to_string(version), version_at);
    }
    RoundPayload p;
    p.client = r.uint<std::uint32_t>();
    p.round = r.uint<std::uint32_t>();
    p.samples = r.uint<std::uint64_t>();
    const std::size_t flags_at = r.offset();
    const auto flags = r.uint<std::uint32_t>();
    if (flags & ~(kFlagAdapters | kFlagPrototypes)) {
      throw ProtocolError("unknown payload flags " + std::to_string(flags), flags_at);
    }
    if (flags == 0) throw ProtocolError("payload carries no parameter group", flags_at);
    for (std::uint32_t bit : {kFlagAdapters, kFlagPrototypes}) {
      if (!(flags & bit)) continue;
      NamedTensors group;
      const auto count = r.uint<std::uint32_t>();
      for (std::uint32_t k = 0; k < count; ++k) {
        const std::size_t at = r.offset();
        auto [name, t] = r.tensor();
        if (group.contains(name)) throw ProtocolError("duplicate tensor '" + name + "'", at);
        group.add(std::move(name), std::move(t));
      }
      (bit == kFlagAdapters ? p.alpha : p.phi) = std::move(group);
    }
    if (!r.at_end()) throw ProtocolError("trailing bytes after payload", r.offset());
    p.bytes = bytes.size();
    return p;
  } catch (const FormatError& e) {
    throw ProtocolError(std::string("malformed payload: ") + e.what(), e.offset());
  }
}

void broadcast(const GlobalState& global, std::vector<ClientState>& clients,
               const FedConfig& config) {
  for (auto& c : clients) {
    if (config.communicate_adapters) {
      if (!c.params.alpha.same_layout(global.alpha)) {
        throw ProtocolError("broadcast: adapter layout mismatch for client " +
                            std::to_string(c.id));
      }
      c.params.alpha = global.alpha;
    }
    for (const auto& name : config.communicated_phi()) {
      if (!c.params.phi.contains(name) || !global.phi.contains(name) ||
          c.params.phi.get(name).shape() != global.phi.get(name).shape()) {
        throw ProtocolError("broadcast: '" + name + "' layout mismatch for client " +
                            std::to_string(c.id));
      }
      c.params.phi.get(name) = global.phi.get(name);
    }
  }
}

LossBreakdown train_step(ParamGroups& params, Optimizer& optimizer, const Tensor& x,
                         std::span<const int> labels, const ModelConfig& model,
                         const LossWeights& weights, const GlobalReference& globals,
                         Trainable trainable, bool use_adapters, std::vector<int>* predictions) {
  ad::Tape tape;
  const ModelVars vars = bind_params(tape, params, trainable);
  const ForwardVars fwd = forward(tape, vars, tape.constant(x), model, use_adapters);
  const auto classes = model.prototype_classes();
  const LossVars lv = local_loss(tape, fwd, vars, params, labels, classes, globals, weights);
  const LossBreakdown loss = read_breakdown(tape, lv);
  if (!std::isfinite(loss.total)) {
    throw NumericError("non-finite loss (ce " + std::to_string(loss.ce) + ", clst " +
                       std::to_string(loss.clst) + ", sep " + std::to_string(loss.sep) + ")");
  }
  if (predictions) *predictions = predict(tape.value(fwd.logits));
  tape.backward(lv.total);
  ParamGroups grads = collect_grads(tape, vars, params);
  optimizer.begin_step();
  if (trainable == Trainable::All) optimizer.step(params.omega, grads.omega);
  optimizer.step(params.alpha, grads.alpha);
  optimizer.step(params.phi, grads.phi);
  return loss;
}

namespace {

void add_scaled(LossBreakdown& acc, const LossBreakdown& b, double s) {
  acc.ce += s * b.ce;
  acc.clst += s * b.clst;
  acc.sep += s * b.sep;
  acc.l1 += s * b.l1;
  acc.adapter_l2 += s * b.adapter_l2;
  acc.prox += s * b.prox;
  acc.total += s * b.total;
}

// Stream tags under the master seed.
constexpr std::uint64_t kSamplerStream = 1000;
constexpr std::uint64_t kAugmentStream = 2000;

}  // namespace

LocalResult local_update(ClientState& client, const GlobalState& global,
                         const TrainingContext& context) {
  const FedConfig& fed = *context.fed;
  const ModelConfig& model = *context.model;
  const SiteDataset& train = client.data.train;
  if (train.size() == 0) throw DataError("client " + std::to_string(client.id) + " has no data");
  if (fed.reset_optimizer) client.optimizer.reset();

  const auto phi_names = fed.communicated_phi();
  const NamedTensors phi_ref = subset(global.phi, phi_names);
  GlobalReference ref;
  if (fed.use_prox) {
    if (fed.communicate_adapters) ref.alpha = &global.alpha;
    if (!phi_names.empty()) ref.phi = &phi_ref;
  }

  LocalResult result;
  std::size_t correct = 0, seen = 0;
  std::vector<int> preds;
  for (std::size_t e = 0; e < fed.local_epochs; ++e) {
    const std::uint64_t epoch = client.epochs_done;
    const auto batches = balanced_batches(train.labels, model.num_classes, fed.batch_size,
                                          derive_seed(fed.seed, {kSamplerStream, client.id, epoch}));
    Rng aug_rng(derive_seed(fed.seed, {kAugmentStream, client.id, epoch}));
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Tensor x = train.gather(batches[b]);
      const auto labels = train.gather_labels(batches[b]);
      if (fed.augment) augment_batch(x, aug_rng);
      LossBreakdown loss;
      try {
        loss = train_step(client.params, client.optimizer, x, labels, model, *context.weights, ref,
                          Trainable::AdaptersAndPrototypes, true, &preds);
      } catch (const NumericError& err) {
        throw NumericError("client " + std::to_string(client.id) + ", round " +
                           std::to_string(global.round + 1) + ", epoch " + std::to_string(e) +
                           ", batch " + std::to_string(b) + ": " + err.what());
      }
      add_scaled(result.mean_loss, loss, 1.0);
      for (std::size_t k = 0; k < labels.size(); ++k) correct += preds[k] == labels[k] ? 1 : 0;
      seen += labels.size();
      ++result.batches;
    }
    ++client.epochs_done;
  }
  if (result.batches > 0) {
    LossBreakdown mean;
    add_scaled(mean, result.mean_loss, 1.0 / static_cast<double>(result.batches));
    result.mean_loss = mean;
  }
  result.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;

  RoundPayload& p = result.payload;
  p.client = client.id;
  p.round = static_cast<std::uint32_t>(global.round + 1);
  p.samples = train.size();
  if (fed.communicate_adapters) p.alpha = client.params.alpha;
  if (!phi_names.empty()) p.phi = subset(client.params.phi, phi_names);
  p.bytes = serialize_payload(p).size();
  return result;
}

std::vector<double> aggregation_weights(std::span<const std::uint64_t> sizes) {
  if (sizes.empty()) throw ProtocolError("no client sizes to weight");
  std::uint64_t total = 0;
  for (auto n : sizes) {
    if (n == 0) throw ProtocolError("client reported zero samples");
    total += n;
  }
  std::vector<double> w;
  w.reserve(sizes.size());
  for (auto n : sizes) w.push_back(static_cast<double>(n) / static_cast<double>(total));
  return w;
}

namespace {

// sum_k w_k t_k, evaluated as t_0 + sum_{k>=1} w_k (t_k - t_0) in client
// order. Identical inputs come back bitwise unchanged; results are clamped
// to the elementwise hull because rounding can step just outside it.
NamedTensors combine(const std::vector<const NamedTensors*>& groups,
                     const std::vector<double>& weights) {
  NamedTensors out;
  for (const auto& [name, first] : *groups[0]) {
    Tensor acc = first, lo = first, hi = first;
    for (std::size_t k = 1; k < groups.size(); ++k) {
      const Tensor& t = groups[k]->get(name);
      for (std::size_t j = 0; j < acc.size(); ++j) {
        const double d = t[j] - first[j];
        if (d != 0.0) acc[j] += weights[k] * d;
        lo[j] = std::min(lo[j], t[j]);
        hi[j] = std::max(hi[j], t[j]);
      }
    }
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] = std::clamp(acc[j], lo[j], hi[j]);
    out.add(name, std::move(acc));
  }
  return out;
}

}  // namespace

GlobalState aggregate(std::vector<RoundPayload> payloads, const GlobalState& previous,
                      std::size_t expected_clients, bool allow_partial) {
  if (payloads.empty()) throw ProtocolError("aggregate: no payloads received");
  std::sort(payloads.begin(), payloads.end(),
            [](const RoundPayload& a, const RoundPayload& b) { return a.client < b.client; });
  for (std::size_t k = 1; k < payloads.size(); ++k) {
    if (payloads[k].client == payloads[k - 1].client) {
      throw ProtocolError("aggregate: duplicate payload from client " +
                          std::to_string(payloads[k].client));
    }
    if (payloads[k].round != payloads[0].round) {
      throw ProtocolError("aggregate: payloads from rounds " + std::to_string(payloads[0].round) +
                          " and " + std::to_string(payloads[k].round));
    }
  }
  if (payloads.size() > expected_clients) {
    throw ProtocolError("aggregate: " + std::to_string(payloads.size()) + " payloads for " +
                        std::to_string(expected_clients) + " clients");
  }
  if (payloads.size() < expected_clients && !allow_partial) {
    throw ProtocolError("aggregate: only " + std::to_string(payloads.size()) + " of " +
                        std::to_string(expected_clients) +
                        " clients reported (allow_partial is off)");
  }

  std::vector<std::uint64_t> sizes;
  for (const auto& p : payloads) sizes.push_back(p.samples);
  const auto weights = aggregation_weights(sizes);

  GlobalState out = previous;
  out.round = payloads[0].round;
  auto merge = [&](std::optional<NamedTensors> RoundPayload::*member, NamedTensors& target,
                   const char* what) {
    const bool present = (payloads[0].*member).has_value();
    std::vector<const NamedTensors*> groups;
    for (const auto& p : payloads) {
      const auto& g = p.*member;
      if (g.has_value() != present) {
        throw ProtocolError(std::string("aggregate: clients disagree on sending ") + what);
      }
      if (!present) continue;
      bool fits = g->same_layout(*(payloads[0].*member));
      for (const auto& [name, t] : *g) {
        fits = fits && target.contains(name) && target.get(name).shape() == t.shape();
      }
      if (!fits) {
        throw ProtocolError(std::string("aggregate: ") + what + " layout mismatch from client " +
                            std::to_string(p.client));
      }
      groups.push_back(&*g);
    }
    if (!present) return;
    for (auto& [name, t] : combine(groups, weights)) target.get(name) = std::move(t);
  };
  merge(&RoundPayload::alpha, out.alpha, "adapters");
  merge(&RoundPayload::phi, out.phi, "prototypes");
  return out;
}

double accuracy(const ParamGroups& params, const ModelConfig& model, const SiteDataset& data,
                std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const auto preds = predict(model_forward(data.gather(idx), params, model).logits);
    for (std::size_t k = 0; k < idx.size(); ++k) correct += preds[k] == data.labels[idx[k]] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

ParamGroups initial_params(const ModelConfig& model, const ImageSpec& image, std::uint64_t seed) {
  model.validate();
  ParamGroups params = init_params(model, seed);
  const BackboneConfig& bb = model.backbone;
  if (bb.freeze_mode != FreezeMode::WarmupPretrained || bb.warmup_steps == 0) return params;
  if (image.channels != bb.input_channels || image.height != bb.input_height ||
      image.width != bb.input_width) {
    throw ConfigError("image extents do not match the backbone input");
  }

  SiteSpec spec{0, bb.warmup_samples, 0.5, 0.0, 1.0, 0.03, derive_seed(seed, {300})};
  const SiteDataset data = generate_site(spec, image);
  pretrain_backbone(params, model, data, seed);
  calibrate_backbone(params, model, data.images);
  return params;
}

void pretrain_backbone(ParamGroups& params, const ModelConfig& model, const SiteDataset& data,
                       std::uint64_t seed) {
  const BackboneConfig& bb = model.backbone;
  const std::size_t D = bb.channels.back();
  Rng rng(derive_seed(seed, {301}));
  NamedTensors probe;
  Tensor w(Shape{D, model.num_classes});
  const double bound = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = uniform(rng, -bound, bound);
  probe.add("probe", std::move(w));

  Optimizer opt(OptimizerKind::Adam, bb.warmup_learning_rate);
  constexpr std::size_t kBatch = 16;
  std::size_t step = 0;
  double last_ce = 0.0;
  for (std::uint64_t epoch = 0; step < bb.warmup_steps; ++epoch) {
    const auto batches = balanced_batches(data.labels, model.num_classes, kBatch,
                                          derive_seed(seed, {302, epoch}));
    for (const auto& batch : batches) {
      if (step == bb.warmup_steps) break;
      ad::Tape tape;
      const ModelVars vars = bind_params(tape, params, Trainable::All);
      const ad::Var pv = tape.leaf(probe.get("probe"), true);
      const ForwardVars fwd = forward(tape, vars, tape.constant(data.gather(batch)), model, false);
      // Global max pool as -min(-z).
      const ad::Var pooled =
          ad::scale(tape, ad::spatial_min(tape, ad::scale(tape, fwd.features, -1.0)), -1.0);
      const ad::Var ce =
          ad::cross_entropy(tape, ad::linear(tape, pooled, pv), data.gather_labels(batch));
      last_ce = tape.value(ce)[0];
      if (!std::isfinite(last_ce)) throw NumericError("backbone warmup diverged at step " + std::to_string(step));
      tape.backward(ce);
      const ParamGroups grads = collect_grads(tape, vars, params);
      NamedTensors probe_grad;
      probe_grad.add("probe", tape.grad(pv));
      opt.begin_step();
      opt.step(params.omega, grads.omega);
      opt.step(probe, probe_grad);
      ++step;
    }
  }
  log::info("backbone warmup: " + std::to_string(step) + " steps, final batch ce " +
            std::to_string(last_ce));
}

void calibrate_backbone(ParamGroups& params, const ModelConfig& model, const Tensor& images,
                        double target_max) {
  if (!(target_max > 0.0)) throw ConfigError("calibration target must be > 0");
  Tensor h = images;
  if (model.backbone.input_offset != 0.0) {
    for (std::size_t i = 0; i < h.size(); ++i) h[i] -= model.backbone.input_offset;
  }
  for (std::size_t b = 0; b < model.backbone.num_blocks(); ++b) {
    Tensor& w = params.omega.get(names::conv_weight(b));
    Tensor& bias = params.omega.get(names::conv_bias(b));
    Tensor out = ops::relu(ops::conv2d(h, w, bias, {1, 1}));
    if (model.backbone.pools(b)) out = ops::maxpool2d(out, 2, 2).output;
    const double peak = *std::max_element(out.data().begin(), out.data().end());
    if (peak > 0.0) {
      // relu and max-pool commute with positive scaling.
      const double s = target_max / peak;
      w *= s;
      bias *= s;
      out *= s;
    }
    h = std::move(out);
  }
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Runs fn(i) for i in [0, n) on up to `workers` threads and rethrows the
// failure of the lowest index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(workers, n); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double adapter_distance(const NamedTensors& local, const NamedTensors& global) {
  double s = 0.0;
  for (const auto& [name, t] : local) {
    const Tensor& g = global.get(name);
    for (std::size_t j = 0; j < t.size(); ++j) s += (t[j] - g[j]) * (t[j] - g[j]);
  }
  return std::sqrt(s);
}

MetricsRow mean_row(const std::vector<MetricsRow>& rows, std::size_t round) {
  MetricsRow m;
  m.round = round;
  m.client = "mean";
  const double inv = 1.0 / static_cast<double>(rows.size());
  if (rows[0].loss) {
    LossBreakdown acc;
    for (const auto& r : rows) add_scaled(acc, *r.loss, inv);
    m.loss = acc;
  }
  if (rows[0].train_acc) {
    double acc = 0.0;
    for (const auto& r : rows) acc += *r.train_acc * inv;
    m.train_acc = acc;
  }
  std::size_t bytes = 0;
  for (const auto& r : rows) {
    m.val_acc += r.val_acc * inv;
    m.test_acc += r.test_acc * inv;
    bytes += r.payload_bytes;
  }
  m.payload_bytes = bytes / rows.size();
  return m;
}

}  // namespace

std::string format_metrics_row(const MetricsRow& row) {
  std::string s = std::to_string(row.round) + "," + row.client + ",";
  if (row.loss) {
    const auto& l = *row.loss;
    for (double v : {l.ce, l.clst, l.sep, l.l1, l.adapter_l2, l.prox, l.total}) s += fmt(v) + ",";
  } else {
    s += ",,,,,,,";
  }
  s += (row.train_acc ? fmt(*row.train_acc) : std::string()) + ",";
  s += fmt(row.val_acc) + "," + fmt(row.test_acc) + "," + std::to_string(row.payload_bytes);
  return s;
}

RunReport run_federation(const FedConfig& config, const ModelConfig& model,
                         const LossWeights& weights, const TaskData& data,
                         const ParamGroups& init,
                         const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  model.validate();
  weights.validate();
  if (data.clients.size() != config.num_clients) {
    throw ConfigError("config expects " + std::to_string(config.num_clients) +
                      " clients but the task has " + std::to_string(data.clients.size()) +
                      " training sites");
  }
  require_compatible(init, model);

  const std::size_t N = config.num_clients;
  std::vector<ClientState> clients(N);
  for (std::size_t i = 0; i < N; ++i) {
    clients[i].id = static_cast<std::uint32_t>(i);
    clients[i].data = data.clients[i];
    clients[i].params = init;
    clients[i].optimizer = Optimizer(config.optimizer, config.learning_rate);
  }
  GlobalState global{init.alpha, init.phi, 0};
  const TrainingContext ctx{&model, &weights, &config};

  RunReport report;
  report.checkpoint_bytes = encode_checkpoint(init).size();

  std::ofstream csv;
  std::ofstream drift_csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    csv.open(*out_dir / "metrics.csv", std::ios::trunc);
    drift_csv.open(*out_dir / "drift.csv", std::ios::trunc);
    if (!csv || !drift_csv) throw Error("cannot write metrics into '" + out_dir->string() + "'");
    csv << kMetricsHeader << '\n';
    drift_csv << "round,client,adapter_drift\n";
    if (config.dump_payloads) std::filesystem::create_directories(*out_dir / "payloads");
  }
  auto emit = [&](std::vector<MetricsRow>& rows, std::size_t round) {
    rows.push_back(mean_row(rows, round));
    if (round == 0 || rows.back().val_acc > report.best_val_acc) {
      report.best_round = round;
      report.best_val_acc = rows.back().val_acc;
      report.best_global = global;
      report.best_clients.clear();
      for (const auto& c : clients) report.best_clients.push_back(c.params);
    }
    for (const auto& r : rows) {
      if (csv.is_open()) csv << format_metrics_row(r) << '\n';
      report.rows.push_back(r);
    }
    if (csv.is_open()) csv.flush();
  };

  try {
    {
      std::vector<MetricsRow> rows(N);
      const double test_acc = accuracy(init, model, data.test);
      parallel_for(N, config.workers, [&](std::size_t i) {
        rows[i] = {0, std::to_string(i), std::nullopt, std::nullopt,
                   accuracy(init, model, clients[i].data.val), test_acc, 0};
      });
      emit(rows, 0);
    }

    for (std::size_t round = 1; round <= config.rounds; ++round) {
      broadcast(global, clients, config);
      std::vector<LocalResult> results(N);
      std::vector<MetricsRow> rows(N);
      parallel_for(N, config.workers, [&](std::size_t i) {
        results[i] = local_update(clients[i], global, ctx);
        rows[i] = {round,
                   std::to_string(i),
                   results[i].mean_loss,
                   results[i].train_acc,
                   accuracy(clients[i].params, model, clients[i].data.val),
                   accuracy(clients[i].params, model, data.test),
                   results[i].payload.bytes};
      });

      std::vector<double> drift(N);
      std::vector<RoundPayload> payloads;
      for (std::size_t i = 0; i < N; ++i) {
        drift[i] = adapter_distance(clients[i].params.alpha, global.alpha);
        if (drift_csv.is_open()) drift_csv << round << ',' << i << ',' << fmt(drift[i]) << '\n';
        if (config.dump_payloads && out_dir) {
          bin::write_file(*out_dir / "payloads" /
                              ("round" + std::to_string(round) + "_client" + std::to_string(i) +
                               ".bin"),
                          serialize_payload(results[i].payload));
        }
        payloads.push_back(std::move(results[i].payload));
      }
      report.adapter_drift.push_back(drift);
      report.payload_bytes = payloads[0].bytes;
      global = aggregate(std::move(payloads), global, N, config.allow_partial);
      emit(rows, round);
      log::info("round " + std::to_string(round) + "/" + std::to_string(config.rounds) +
                ": mean test accuracy " + fmt(report.rows.back().test_acc));
    }
  } catch (const std::exception& e) {
    log::warn(std::string("run halted, partial report kept: ") + e.what());
    throw;
  }

  report.global = global;
  for (const auto& c : clients) report.clients.push_back(c.params);
  for (const auto& r : report.rows) {
    if (r.round == config.rounds && r.client != "mean") report.final_test_acc.push_back(r.test_acc);
  }
  report.final_mean_test_acc = report.rows.back().test_acc;
  if (report.payload_bytes == 0) {
    RoundPayload p;
    p.samples = 1;
    if (config.communicate_adapters) p.alpha = init.alpha;
    if (config.communicate_prototypes) p.phi = subset(init.phi, config.communicated_phi());
    report.payload_bytes = serialize_payload(p).size();
  }

  if (out_dir) {
    drift_csv.flush();
    save_checkpoint(*out_dir / "global.ckpt", ParamGroups{init.omega, global.alpha, global.phi});
    for (std::size_t i = 0; i < N; ++i) {
      save_checkpoint(*out_dir / ("client_" + std::to_string(i) + ".ckpt"), clients[i].params);
    }
    const auto best = *out_dir / "best";
    std::filesystem::create_directories(best);
    save_checkpoint(best / "global.ckpt",
                    ParamGroups{init.omega, report.best_global.alpha, report.best_global.phi});
    for (std::size_t i = 0; i < N; ++i) {
      save_checkpoint(best / ("client_" + std::to_string(i) + ".ckpt"), report.best_clients[i]);
    }
    std::ofstream(best / "round.txt", std::ios::trunc) << report.best_round << '\n';
  }
  return report;
}

void write_comparison(const std::filesystem::path& path, const std::vector<VariantResult>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "variant";
  const std::size_t n = rows.empty() ? 0 : rows[0].client_acc.size();
  for (std::size_t i = 0; i < n; ++i) out << ",client_" << i;
  out << ",avg,payload_bytes,checkpoint_bytes,payload_ratio\n";
  for (const auto& r : rows) {
    out << r.variant;
    for (double a : r.client_acc) out << ',' << fmt(a);
    const double ratio = r.checkpoint_bytes ? static_cast<double>(r.payload_bytes) /
                                                  static_cast<double>(r.checkpoint_bytes)
                                            : 0.0;
    out << ',' << fmt(r.mean_acc) << ',' << r.payload_bytes << ',' << r.checkpoint_bytes << ','
        << fmt(ratio) << '\n';
  }
}

std::vector<VariantResult> compare_variants(const std::vector<std::string>& variants,
                                            const FedConfig& base, const ModelConfig& model,
                                            const LossWeights& weights, const TaskData& data,
                                            const ParamGroups& init,
                                            const std::optional<std::filesystem::path>& out_dir) {
  if (variants.empty()) throw ConfigError("variant grid is empty");
  std::vector<VariantResult> table;
  for (const auto& name : variants) {
    FedConfig fed = base;
    LossWeights w = weights;
    apply_variant(find_variant(name), fed, w);
    log::info("variant " + name);
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / name;
    const RunReport run = run_federation(fed, model, w, data, init, dir);
    table.push_back(
        {name, run.final_test_acc, run.final_mean_test_acc, run.payload_bytes, run.checkpoint_bytes});
  }
  if (out_dir) write_comparison(*out_dir / "comparison.csv", table);
  return table;
}

}  // namespace protofed

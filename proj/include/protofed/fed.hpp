#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/loss.hpp"
#include "protofed/model.hpp"
#include "protofed/optim.hpp"

namespace protofed {

struct FedConfig {
  std::size_t num_clients = 4;
  std::size_t rounds = 50;
  std::size_t local_epochs = 1;
  double learning_rate = 1e-4;
  std::size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::Adam;
  // Which parameter groups travel to the server. The head rides along with
  // the prototypes unless communicate_head is off, in which case it stays
  // personal.
  bool communicate_adapters = true;
  bool communicate_prototypes = true;
  bool communicate_head = true;
  bool use_prox = true;
  bool reset_optimizer = false;
  bool allow_partial = false;
  bool augment = false;
  std::uint64_t seed = 42;
  std::size_t workers = 1;
  // Write every payload to <out>/payloads/.
  bool dump_payloads = false;

  void validate() const;
  // Names of the phi tensors exchanged with the server (may be empty).
  std::vector<std::string> communicated_phi() const;
};

// Named preset of the variant switches.
struct Variant {
  std::string name;
  bool communicate_adapters = true;
  bool communicate_prototypes = true;
  bool use_prox = true;
  bool adapter_l2 = true;
  // One proximal coefficient (mu1) for every communicated group.
  bool shared_mu = false;
};

// fedavg, fedprox, fedadapter, fedadapter_noprox, prototypes_only, ours.
const std::vector<Variant>& known_variants();
const Variant& find_variant(const std::string& name);
// The five-row comparison grid run by default.
std::vector<std::string> default_variant_grid();
void apply_variant(const Variant& variant, FedConfig& fed, LossWeights& weights);

struct GlobalState {
  NamedTensors alpha;
  NamedTensors phi;
  std::size_t round = 0;
};

struct RoundPayload {
  std::uint32_t client = 0;
  std::uint32_t round = 0;
  std::uint64_t samples = 0;
  std::optional<NamedTensors> alpha;
  std::optional<NamedTensors> phi;
  // Serialized size; filled by serialize_payload / deserialize_payload.
  std::size_t bytes = 0;

  bool identical(const RoundPayload& other) const;
};

// "PFPL", u32 version, u32 client, u32 round, u64 samples, u32 flags
// (bit 0 alpha, bit 1 phi), then per flagged group a u32 tensor count
// followed by (name, tensor) records. Little-endian. The phi group holds the
// prototypes and, when communicated, the head.
inline constexpr std::uint32_t kPayloadVersion = 1;
std::vector<std::uint8_t> serialize_payload(const RoundPayload& payload);
RoundPayload deserialize_payload(const std::vector<std::uint8_t>& bytes);

struct ClientState {
  std::uint32_t id = 0;
  Split data;
  ParamGroups params;
  Optimizer optimizer{OptimizerKind::Adam, 1e-4};
  // Local epochs completed so far; selects the sampler stream.
  std::size_t epochs_done = 0;
};

// Overwrites the client's communicated tensors with copies of the global
// ones. Throws ProtocolError on a layout mismatch.
void broadcast(const GlobalState& global, std::vector<ClientState>& clients,
               const FedConfig& config);

struct TrainingContext {
  const ModelConfig* model = nullptr;
  const LossWeights* weights = nullptr;
  const FedConfig* fed = nullptr;
};

struct LocalResult {
  RoundPayload payload;
  LossBreakdown mean_loss;  // averaged over the batches of this update
  double train_acc = 0.0;   // on the training batches, before each step
  std::size_t batches = 0;
};

// E epochs of the class-balanced sampler over the client's training split,
// updating alpha and phi. The proximal reference is `global` for the
// communicated groups when prox is on.
LocalResult local_update(ClientState& client, const GlobalState& global,
                         const TrainingContext& context);

// One optimizer step on a batch. Returns the loss before the step; `predictions`
// receives the batch predictions when non-null.
LossBreakdown train_step(ParamGroups& params, Optimizer& optimizer, const Tensor& x,
                         std::span<const int> labels, const ModelConfig& model,
                         const LossWeights& weights, const GlobalReference& globals,
                         Trainable trainable, bool use_adapters,
                         std::vector<int>* predictions = nullptr);

// w_i = n_i / sum_j n_j.
std::vector<double> aggregation_weights(std::span<const std::uint64_t> sizes);

// Convex combination of the payloads' tensors, summed in ascending client
// order. Tensors absent from the payloads keep the previous global values.
// With fewer than `expected_clients` payloads: ProtocolError unless
// `allow_partial`, in which case the weights are renormalized.
GlobalState aggregate(std::vector<RoundPayload> payloads, const GlobalState& previous,
                      std::size_t expected_clients, bool allow_partial);

double accuracy(const ParamGroups& params, const ModelConfig& model, const SiteDataset& data,
                std::size_t batch_size = 32);

// Initial parameters: omega is either the random init or a pretrained
// backbone (see pretrain_backbone) on a fresh balanced synthetic split,
// calibrated afterwards; alpha/phi always come from the fresh init.
ParamGroups initial_params(const ModelConfig& model, const ImageSpec& image, std::uint64_t seed);

// Central supervised pretraining of omega: global max pool over the final
// feature map feeding a linear probe, cross-entropy, Adam at the warmup
// learning rate. The probe is discarded.
void pretrain_backbone(ParamGroups& params, const ModelConfig& model, const SiteDataset& data,
                       std::uint64_t seed);

// Rescales each block's kernel and bias so its largest output activation
// over `images` (adapters off) equals target_max. The backbone's decisions
// are unchanged; only the feature scale moves into the prototypes' range.
void calibrate_backbone(ParamGroups& params, const ModelConfig& model, const Tensor& images,
                        double target_max = 1.0);

struct MetricsRow {
  std::size_t round = 0;
  std::string client;  // client id or "mean"
  std::optional<LossBreakdown> loss;
  std::optional<double> train_acc;
  double val_acc = 0.0;
  double test_acc = 0.0;
  std::size_t payload_bytes = 0;
};

inline constexpr const char* kMetricsHeader =
    "round,client,ce,clst,sep,l1,adapter_l2,prox,total,train_acc,val_acc,test_acc,payload_bytes";
std::string format_metrics_row(const MetricsRow& row);

struct RunReport {
  std::vector<MetricsRow> rows;
  GlobalState global;
  std::vector<ParamGroups> clients;
  // adapter_drift[r - 1][i] = ||alpha_i - alpha_g||_2 at collection in round r,
  // alpha_g being the reference broadcast at the start of the round.
  std::vector<std::vector<double>> adapter_drift;
  std::size_t payload_bytes = 0;     // one client's payload
  std::size_t checkpoint_bytes = 0;  // full parameter checkpoint
  std::vector<double> final_test_acc;
  double final_mean_test_acc = 0.0;
  // Round with the highest mean client validation accuracy (earliest on
  // ties) and the parameters at that point.
  std::size_t best_round = 0;
  double best_val_acc = 0.0;
  GlobalState best_global;
  std::vector<ParamGroups> best_clients;
};

// Round 0 evaluates the initial parameters, then rounds 1..R of broadcast,
// local updates and aggregation. When `out_dir` is set, writes metrics.csv
// (flushed per round, so failures leave a partial report), drift.csv,
// global.ckpt, client_<i>.ckpt, and the best-validation round's checkpoints
// under best/ with its round number in best/round.txt.
RunReport run_federation(const FedConfig& config, const ModelConfig& model,
                         const LossWeights& weights, const TaskData& data,
                         const ParamGroups& init,
                         const std::optional<std::filesystem::path>& out_dir = std::nullopt);

struct VariantResult {
  std::string variant;
  std::vector<double> client_acc;
  double mean_acc = 0.0;
  std::size_t payload_bytes = 0;
  std::size_t checkpoint_bytes = 0;
};

// Runs every variant from the same initial parameters and data. Each run
// goes into <out_dir>/<variant>/ and the table into <out_dir>/comparison.csv.
std::vector<VariantResult> compare_variants(
    const std::vector<std::string>& variants, const FedConfig& base, const ModelConfig& model,
    const LossWeights& weights, const TaskData& data, const ParamGroups& init,
    const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// variant,client_0..client_{N-1},avg,payload_bytes,checkpoint_bytes,payload_ratio
void write_comparison(const std::filesystem::path& path, const std::vector<VariantResult>& rows);

}  // namespace protofed

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "protofed/commands.hpp"
#include "protofed/log.hpp"

using namespace protofed;

namespace {

constexpr int kValidationExit = 1;
constexpr int kRuntimeExit = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  bool quiet = false;
};

RunConfig resolve(const Common& common, ConfigOverrides extra) {
  ConfigOverrides overrides;
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  // Dedicated flags win over --set.
  for (auto& o : extra) overrides.push_back(std::move(o));
  return common.config_path.empty() ? default_config(overrides)
                                    : load_config(common.config_path, overrides);
}

template <typename T>
void add_override(ConfigOverrides& o, const std::string& key, const std::optional<T>& v) {
  if (v) o.emplace_back(key, std::to_string(*v));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated prototype networks with adapters on synthetic multi-site data"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("-c,--config", common.config_path, "Run config (key = value with [section] headers)")
      ->check(CLI::ExistingFile);
  app.add_option("--set", common.sets, "Override a config value: section.key=value (repeatable)");
  app.add_flag("-q,--quiet", common.quiet, "Only print results");

  auto* partition = app.add_subcommand("partition", "Generate the synthetic sites as PNM images and manifests");
  std::string part_out;
  bool force = false;
  std::optional<std::uint64_t> part_seed;
  partition->add_option("-o,--out", part_out, "Output directory (default: [run] data_dir or 'data')");
  partition->add_flag("--force", force, "Overwrite a non-empty output directory");
  partition->add_option("--seed", part_seed, "Master seed");

  auto* train = app.add_subcommand("train", "Run federated training");
  std::optional<std::string> train_out, variant, data_dir, variants;
  std::optional<std::size_t> rounds, workers;
  std::optional<std::uint64_t> train_seed;
  bool grid = false, dump = false;
  train->add_option("-o,--out", train_out, "Run directory");
  train->add_option("--rounds", rounds, "Communication rounds");
  train->add_option("--workers", workers, "Clients trained concurrently per round");
  train->add_option("--seed", train_seed, "Master seed");
  train->add_option("--variant", variant, "fedavg|fedprox|fedadapter|fedadapter_noprox|prototypes_only|ours");
  train->add_flag("--grid", grid, "Run every variant of the grid and write comparison.csv");
  train->add_option("--variants", variants, "Comma-separated grid (implies --grid)");
  train->add_flag("--dump-payloads", dump, "Write every client payload under <out>/payloads/");
  train->add_option("--data", data_dir, "Load sites written by partition");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and the local loss");
  GradcheckOptions gc;
  gradcheck->add_option("--tolerance", gc.tolerance, "Maximum relative error")->capture_default_str();
  gradcheck->add_option("--step", gc.step, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--seeds", gc.seeds, "Number of seeds")->capture_default_str();
  gradcheck->add_option("--seed", gc.first_seed, "First seed")->capture_default_str();

  auto* inspect = app.add_subcommand("inspect", "Explain predictions with prototype heatmaps and boxes");
  InspectOptions io;
  std::string inspect_run, inspect_out;
  std::vector<std::string> ckpts, images;
  std::string manifest;
  std::optional<std::size_t> top_k;
  std::optional<double> percentile;
  bool no_overlays = false;
  inspect->add_option("--run", inspect_run, "Run directory with config.ini and client checkpoints");
  inspect->add_flag("--best", io.best, "Use the best-validation checkpoints of the run");
  inspect->add_option("--checkpoint", ckpts, "Checkpoint file (repeatable; replaces the run's clients)");
  inspect->add_option("--manifest", manifest, "Manifest CSV; truth boxes are scored");
  inspect->add_flag("--diseased-only", io.diseased_only, "Skip healthy manifest rows");
  inspect->add_option("--limit", io.limit, "Use at most this many manifest rows");
  inspect->add_option("--top-k", top_k, "Prototypes rendered per image and client");
  inspect->add_option("--percentile", percentile, "Heatmap percentile for the box");
  inspect->add_flag("--no-overlays", no_overlays, "Skip the per-prototype CSV and PPM files");
  inspect->add_option("-o,--out", inspect_out, "Output directory")->required();
  inspect->add_option("images", images, "PGM/PPM images");

  auto* report = app.add_subcommand("report", "Tabulate final-round accuracies of finished runs");
  std::vector<std::string> runs;
  std::optional<std::string> report_out;
  report->add_option("runs", runs, "Run directories (a grid directory expands to its variants)")->required();
  report->add_option("-o,--out", report_out, "Write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kValidationExit;
  }
  log::set_quiet(common.quiet);

  try {
    if (partition->parsed()) {
      ConfigOverrides o;
      add_override(o, "run.seed", part_seed);
      RunConfig cfg = resolve(common, o);
      const std::filesystem::path out = !part_out.empty() ? std::filesystem::path(part_out)
                                        : !cfg.data_dir.empty() ? cfg.data_dir
                                                                : std::filesystem::path("data");
      for (const auto& m : cmd_partition(cfg, out, force)) std::cout << m.string() << '\n';
      return 0;
    }
    if (train->parsed()) {
      ConfigOverrides o;
      add_override(o, "fed.rounds", rounds);
      add_override(o, "fed.workers", workers);
      add_override(o, "run.seed", train_seed);
      if (train_out) o.emplace_back("run.output_dir", *train_out);
      if (variant) o.emplace_back("run.variant", *variant);
      if (variants) o.emplace_back("run.grid", *variants);
      if (data_dir) o.emplace_back("run.data_dir", *data_dir);
      if (dump) o.emplace_back("fed.dump_payloads", "true");
      const RunConfig cfg = resolve(common, o);
      const auto rows = cmd_train(cfg, grid || variants.has_value());
      for (const auto& r : rows) {
        std::cout << r.variant << ": final mean test accuracy " << r.mean_acc << '\n';
      }
      return 0;
    }
    if (gradcheck->parsed()) return cmd_gradcheck(gc, std::cout) ? 0 : kRuntimeExit;
    if (inspect->parsed()) {
      io.run_dir = inspect_run;
      if (!common.config_path.empty() || !common.sets.empty()) io.config = resolve(common, {});
      for (const auto& c : ckpts) io.checkpoints.emplace_back(c);
      for (const auto& i : images) io.images.emplace_back(i);
      io.manifest = manifest;
      io.top_k = top_k;
      io.percentile = percentile;
      io.out = inspect_out;
      io.write_overlays = !no_overlays;
      cmd_inspect(io, std::cout);
      return 0;
    }
    if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      std::optional<std::filesystem::path> csv;
      if (report_out) csv = *report_out;
      cmd_report(dirs, csv, std::cout);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidationExit;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidationExit;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidationExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeExit;
  }
  return kRuntimeExit;
}

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "protofed/config.hpp"
#include "protofed/fed.hpp"
#include "protofed/gradcheck.hpp"

namespace protofed {

// Writes <out>/site<id>/ for every training site and <out>/test/, each with
// PNM images and manifest.csv, plus the resolved config. A non-empty `out`
// is refused unless `force`. Returns the manifest paths.
std::vector<std::filesystem::path> cmd_partition(const RunConfig& config,
                                                 const std::filesystem::path& out, bool force);

// Single run (config.variant applied when set) or, with `grid`, every
// variant of config.grid under <output_dir>/<variant>/. Every run directory
// gets config.ini; grid mode also writes comparison.csv.
std::vector<VariantResult> cmd_train(const RunConfig& config, bool grid);

struct NamedCheck {
  std::string name;
  GradCheckReport report;
};

// Every differentiable op plus the full local loss (all terms active, random
// global references) on a 2-block, 8-channel, 16x16 model.
std::vector<NamedCheck> gradcheck_suite(std::uint64_t seed, double step, double tolerance);

struct GradcheckOptions {
  double tolerance = 1e-5;
  double step = 1e-6;
  std::size_t seeds = 1;
  std::uint64_t first_seed = 0;
};
// Prints one line per check and seed; returns true when all pass.
bool cmd_gradcheck(const GradcheckOptions& options, std::ostream& out);

struct InspectOptions {
  // Run directory holding config.ini and client_<i>.ckpt; the model config
  // comes from there unless `config` is given.
  std::filesystem::path run_dir;
  bool best = false;  // read run_dir/best/ instead of the final checkpoints
  std::vector<std::filesystem::path> checkpoints;  // overrides the run's clients
  std::optional<RunConfig> config;
  std::vector<std::filesystem::path> images;
  // Manifest with truth boxes; IoU is scored against them.
  std::filesystem::path manifest;
  bool diseased_only = false;
  std::size_t limit = 0;  // 0 = all manifest rows
  std::optional<std::size_t> top_k;
  std::optional<double> percentile;
  std::filesystem::path out;
  bool write_overlays = true;
};

struct InspectSummary {
  std::size_t images = 0;
  std::size_t scored = 0;  // images with a truth box
  std::size_t clients = 0;
  // Over scored images and clients: top prototype of the true class.
  double hit_rate = 0.0;  // fraction with IoU >= 0.3
  double mean_iou = 0.0;
  // Mean off-diagonal agreement IoU over all images (needs >= 2 clients).
  std::optional<double> mean_agreement;
};

inline constexpr double kLocalizationIoU = 0.3;

// Writes <out>/client_<i>/<stem>.csv and overlays, <out>/agreement/<stem>.csv
// and <out>/iou_summary.csv (one row per image).
InspectSummary cmd_inspect(const InspectOptions& options, std::ostream& out);

struct ReportRow {
  VariantResult result;
  std::filesystem::path run;
  std::size_t checkpoint_bytes = 0;
  double payload_ratio = 0.0;
};

// Final-round accuracies of each run. A directory without metrics.csv but
// with a grid config.ini expands to its variant subdirectories. Writes the
// table to `csv` when set and prints payload/checkpoint ratios.
std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& runs,
                                  const std::optional<std::filesystem::path>& csv,
                                  std::ostream& out);

}  // namespace protofed

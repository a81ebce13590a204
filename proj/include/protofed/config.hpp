#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/fed.hpp"
#include "protofed/loss.hpp"
#include "protofed/model.hpp"

namespace protofed {

struct InterpretConfig {
  std::size_t top_k = 3;
  double percentile = 95.0;
};

// Everything a run needs. Text form is line-oriented `key = value` under
// `[section]` headers; `#` and `;` start comments.
//
//   [run]        seed, output_dir, data_dir, variant, grid
//   [fed]        FedConfig fields
//   [model]      BackboneConfig and ModelConfig fields
//   [loss]       LossWeights fields
//   [data]       image extents, glyph_size, train_fraction
//   [site.K]     samples, healthy_fraction, brightness, contrast, noise_std, seed
//   [test]       same keys as a site
//   [interpret]  top_k, percentile
//
// Sites default to default_task(seed); [fed] num_clients resizes the list.
struct RunConfig {
  std::uint64_t seed = 42;
  std::filesystem::path output_dir = "runs/default";
  // Load sites written by `partition` from here instead of generating them.
  std::filesystem::path data_dir;
  // Preset applied by `train`; empty keeps the [fed]/[loss] switches as given.
  std::string variant;
  std::vector<std::string> grid = default_variant_grid();
  FedConfig fed;
  ModelConfig model;
  LossWeights loss;
  TaskConfig task = default_task(42);
  InterpretConfig interpret;

  void validate() const;
};

// "section.key" -> value, applied after the file so they take precedence.
using ConfigOverrides = std::vector<std::pair<std::string, std::string>>;

// Throws ConfigError naming the line for syntax errors, unknown or repeated
// keys and bad values; the result is validated.
RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides = {},
                       const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {});
// Defaults plus overrides.
RunConfig default_config(const ConfigOverrides& overrides = {});

// Every key with its resolved value; parse_config(render_config(c)) == c.
std::string render_config(const RunConfig& config);
void write_config(const RunConfig& config, const std::filesystem::path& path);

// Image spec shared by the model and the data generator.
ImageSpec image_spec(const RunConfig& config);

// Directory of a site under data_dir: site<id>, or test for the held-out site.
std::string site_directory(const SiteSpec& spec, bool test);

// Sites from data_dir when set, generated otherwise.
TaskData load_task(const RunConfig& config);

}  // namespace protofed

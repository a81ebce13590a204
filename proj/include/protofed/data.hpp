#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protofed/random.hpp"
#include "protofed/tensor.hpp"

namespace protofed {

// Pixel rectangle; x/y is the top-left corner.
struct Box {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool operator==(const Box&) const = default;
};

struct ImageSpec {
  std::size_t channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 2;
  // Side of the square region that holds a lesion glyph.
  std::size_t glyph_size = 16;
};

// One simulated clinical site: label skew plus an appearance shift.
struct SiteSpec {
  int id = 0;
  std::size_t samples = 0;
  double healthy_fraction = 0.5;
  double brightness = 0.0;
  double contrast = 1.0;
  double noise_std = 0.03;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SiteDataset {
  Tensor images;  // N x C x H x W, values in [0, 1]
  std::vector<int> labels;
  // Planted-glyph rectangle for diseased samples, nullopt for healthy ones.
  std::vector<std::optional<Box>> boxes;
  SiteSpec spec;

  std::size_t size() const { return labels.size(); }
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
  SiteDataset subset(std::span<const std::size_t> indices) const;
  std::size_t count_label(int label) const;
};

// Background: smooth random field with dark vessel-like strokes, shifted by
// the site's brightness/contrast/noise. Diseased samples (label >= 1) get a
// cluster of bright blobs at a uniform random position; its exact support
// rectangle is recorded. Label 0 is healthy.
SiteDataset generate_site(const SiteSpec& spec, const ImageSpec& image);

struct Split {
  SiteDataset train;
  SiteDataset val;
};
// Stratified by label; each class contributes round(fraction * count) samples
// to train.
Split split_train_val(const SiteDataset& dataset, double fraction, std::uint64_t seed);
// Index form of the split (train indices, val indices), each sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::span<const int> labels, double fraction, std::uint64_t seed);

// One epoch of class-balanced batches. Each batch holds floor(B/C) or
// ceil(B/C) samples of every class; an epoch has
// ceil(n_minority / floor(B/C)) batches (= ceil(C * n_minority / B) when C
// divides B). Every class pool is shuffled and cycled, reshuffling when
// exhausted, so minority classes are oversampled and each minority index is
// drawn at least once per epoch.
std::vector<std::vector<std::size_t>> balanced_batches(std::span<const int> labels,
                                                       std::size_t num_classes,
                                                       std::size_t batch_size, std::uint64_t seed);
std::size_t balanced_epoch_length(std::span<const int> labels, std::size_t num_classes,
                                  std::size_t batch_size);

// Random flips, 90-degree rotations (square images only) and brightness
// jitter applied in place to every image of a batch.
void augment_batch(Tensor& batch, Rng& rng);

// Multi-site task: training sites (each split into train/val) plus one
// held-out test site.
struct TaskConfig {
  ImageSpec image;
  std::vector<SiteSpec> sites;
  SiteSpec test;
  double train_fraction = 0.8;

  void validate() const;
};

// Four training sites of 600/500/400/300 samples with healthy fractions
// 0.76/0.55/0.81/0.84 and distinct appearance shifts; a 400-sample test site
// at 0.8151 healthy. Site seeds derive from `seed`.
TaskConfig default_task(std::uint64_t seed);

struct TaskData {
  std::vector<Split> clients;
  SiteDataset test;
};
// Split seeds derive from each site's own seed.
TaskData build_task(const TaskConfig& task);

// Binary 8-bit PGM (P5, 1 channel) or PPM (P6, 3 channels); max value must
// be 255. Loaded as 1 x C x H x W with values scaled to [0, 1].
Tensor load_pnm(const std::filesystem::path& path);
Tensor decode_pnm(const std::vector<std::uint8_t>& bytes);
// Accepts C x H x W or 1 x C x H x W with C in {1, 3}; values are clamped to
// [0, 1] and rounded to 8 bits.
void save_pnm(const Tensor& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_pnm(const Tensor& image);

// Manifest CSV: path,label,site,box_x,box_y,box_w,box_h (box fields empty for
// healthy samples). Paths are relative to the manifest's directory.
struct ManifestRow {
  std::string path;
  int label = 0;
  int site = 0;
  std::optional<Box> box;
};
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);
// Writes images as PNM files plus manifest.csv into `dir`.
void write_site(const SiteDataset& dataset, const std::filesystem::path& dir);
SiteDataset load_site(const std::filesystem::path& manifest, const ImageSpec& image);

}  // namespace protofed

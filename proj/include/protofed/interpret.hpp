#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "protofed/data.hpp"
#include "protofed/model.hpp"

namespace protofed {

// Bilinear resize of an H x W map with corner alignment (the corner pixels of
// source and target coincide). Upscaling only.
Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width);

// Per-map min-max scaling to [0, 1]; a constant map becomes all zeros.
Tensor normalize_heatmap(const Tensor& map);

struct BoxResult {
  Box box;
  // Set when the heatmap is constant and the box is the whole image.
  bool degenerate = false;
};

// Smallest rectangle holding every pixel >= the given percentile of the
// heatmap (linear interpolation between order statistics). When that
// threshold equals the map minimum of a non-constant map it is raised to the
// next larger value, so the background alone never qualifies.
BoxResult activation_bbox(const Tensor& heatmap, double percentile = 95.0);

double iou(const Box& a, const Box& b);

struct PrototypeActivation {
  std::size_t prototype = 0;
  int prototype_class = 0;
  Tensor similarity;  // H' x W', negated distances
  Tensor heatmap;     // H x W at input resolution, normalized to [0, 1]
  double score = 0.0;
  Box box;
  bool degenerate = false;
};

struct Explanation {
  int predicted = 0;
  // Sorted by score, highest first (lower index wins ties).
  std::vector<PrototypeActivation> activations;

  // Highest-scoring activation of the given class; nullptr if none listed.
  const PrototypeActivation* top_of_class(int cls) const;
};

// `image` is C x H x W or 1 x C x H x W. Reports the top_k prototypes by
// score; top_k = 0 keeps all of them.
Explanation explain(const Tensor& image, const ParamGroups& params, const ModelConfig& config,
                    std::size_t top_k, double percentile = 95.0);

// Image with the activation's box drawn in red, next to a blue-to-red
// rendering of the heatmap: 3 x H x 2W.
Tensor render_overlay(const Tensor& image, const PrototypeActivation& activation);

// Writes <stem>_p<index>.ppm for each activation and <stem>.csv with
// prototype,class,score,box_x,box_y,box_w,box_h.
void write_explanation(const Explanation& explanation, const Tensor& image,
                       const std::filesystem::path& dir, const std::string& stem);

// Box of the top prototype matching each model's predicted class, and the
// pairwise IoU of those boxes (symmetric, unit diagonal).
struct Agreement {
  std::vector<Box> boxes;
  std::vector<std::vector<double>> iou;
  double mean_off_diagonal() const;
};
Agreement cross_client_agreement(const Tensor& image, const std::vector<ParamGroups>& clients,
                                 const ModelConfig& config, double percentile = 95.0);

}  // namespace protofed

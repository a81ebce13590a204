#include "protofed/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "protofed/log.hpp"

namespace protofed {

Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width) {
  if (map.rank() != 2) throw ConfigError("upsample expects an H x W map, got " + shape_to_string(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (height < h || width < w) {
    throw ConfigError("upsample cannot shrink " + shape_to_string(map.shape()) + " to " +
                      std::to_string(height) + "x" + std::to_string(width));
  }
  Tensor out(Shape{height, width});
  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    return dst == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(src - 1) /
                                static_cast<double>(dst - 1);
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = coord(y, h, height);
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = coord(x, w, width);
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      const double a = map[y0 * w + x0], b = map[y0 * w + x1];
      const double c = map[y1 * w + x0], d = map[y1 * w + x1];
      // Skip zero-weight corners so constant maps stay exact.
      double top = tx == 0.0 ? a : (a == b ? a : (1 - tx) * a + tx * b);
      double bottom = tx == 0.0 ? c : (c == d ? c : (1 - tx) * c + tx * d);
      out[y * width + x] = ty == 0.0 ? top : (top == bottom ? top : (1 - ty) * top + ty * bottom);
    }
  }
  return out;
}

Tensor normalize_heatmap(const Tensor& map) {
  Tensor out = map;
  if (map.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double min = *lo, range = *hi - *lo;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = range > 0.0 ? (map[i] - min) / range : 0.0;
  return out;
}

BoxResult activation_bbox(const Tensor& heatmap, double percentile) {
  if (heatmap.rank() != 2 || heatmap.size() == 0) {
    throw ConfigError("activation_bbox expects a nonempty H x W heatmap");
  }
  if (!(percentile >= 0.0 && percentile <= 100.0)) {
    throw ConfigError("percentile must lie in [0, 100]");
  }
  const std::size_t H = heatmap.dim(0), W = heatmap.dim(1);
  std::vector<double> sorted = heatmap.values();
  std::sort(sorted.begin(), sorted.end());
  if (sorted.front() == sorted.back()) {
    return {{0, 0, static_cast<int>(W), static_cast<int>(H)}, true};
  }
  const double pos = percentile / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  double threshold = frac == 0.0 ? sorted[lo] : sorted[lo] + frac * (sorted[hi] - sorted[lo]);
  if (threshold <= sorted.front()) {
    threshold = *std::upper_bound(sorted.begin(), sorted.end(), sorted.front());
  }
  int x0 = static_cast<int>(W), y0 = static_cast<int>(H), x1 = -1, y1 = -1;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      if (heatmap[y * W + x] < threshold) continue;
      x0 = std::min(x0, static_cast<int>(x));
      y0 = std::min(y0, static_cast<int>(y));
      x1 = std::max(x1, static_cast<int>(x));
      y1 = std::max(y1, static_cast<int>(y));
    }
  }
  return {{x0, y0, x1 - x0 + 1, y1 - y0 + 1}, false};
}

double iou(const Box& a, const Box& b) {
  const long ix = std::max(0L, static_cast<long>(std::min(a.x + a.w, b.x + b.w)) - std::max(a.x, b.x));
  const long iy = std::max(0L, static_cast<long>(std::min(a.y + a.h, b.y + b.h)) - std::max(a.y, b.y));
  const long inter = ix * iy;
  const long uni = static_cast<long>(a.w) * a.h + static_cast<long>(b.w) * b.h - inter;
  if (uni <= 0) return a == b ? 1.0 : 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

const PrototypeActivation* Explanation::top_of_class(int cls) const {
  for (const auto& a : activations) {
    if (a.prototype_class == cls) return &a;
  }
  return nullptr;
}

namespace {

Tensor as_batch(const Tensor& image) {
  if (image.rank() == 4 && image.dim(0) == 1) return image;
  if (image.rank() == 3) return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  throw ConfigError("expected a single C x H x W image, got " + shape_to_string(image.shape()));
}

}  // namespace

Explanation explain(const Tensor& image, const ParamGroups& params, const ModelConfig& config,
                    std::size_t top_k, double percentile) {
  const Tensor x = as_batch(image);
  const std::size_t H = x.dim(2), W = x.dim(3);
  const ModelOutput out = model_forward(x, params, config);
  const std::size_t m = out.scores.dim(1);
  const std::size_t mh = out.distance_maps.dim(2), mw = out.distance_maps.dim(3);
  const auto classes = config.prototype_classes();

  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.scores[a] > out.scores[b]; });
  if (top_k == 0 || top_k > m) top_k = m;

  Explanation ex;
  ex.predicted = predict(out.logits)[0];
  for (std::size_t k = 0; k < top_k; ++k) {
    const std::size_t j = order[k];
    PrototypeActivation a;
    a.prototype = j;
    a.prototype_class = classes[j];
    a.score = out.scores[j];
    a.similarity = Tensor(Shape{mh, mw});
    for (std::size_t i = 0; i < mh * mw; ++i) a.similarity[i] = -out.distance_maps[j * mh * mw + i];
    a.heatmap = normalize_heatmap(upsample_bilinear(a.similarity, H, W));
    const BoxResult box = activation_bbox(a.heatmap, percentile);
    a.box = box.box;
    a.degenerate = box.degenerate;
    if (box.degenerate) {
      log::warn_once("constant-heatmap", "constant activation map; using the full-image box");
    }
    ex.activations.push_back(std::move(a));
  }
  return ex;
}

Tensor render_overlay(const Tensor& image, const PrototypeActivation& activation) {
  const Tensor x = as_batch(image);
  const std::size_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (activation.heatmap.shape() != Shape{H, W}) {
    throw ConfigError("heatmap extents differ from the image");
  }
  Tensor out(Shape{3, H, 2 * W});
  auto put = [&](std::size_t c, std::size_t y, std::size_t xx, double v) {
    out[(c * H + y) * 2 * W + xx] = v;
  };
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      for (std::size_t c = 0; c < 3; ++c) put(c, y, xx, x.at(0, C == 3 ? c : 0, y, xx));
      // Blue (cold) through white to red (hot).
      const double v = activation.heatmap[y * W + xx];
      const double r = v < 0.5 ? 2 * v : 1.0;
      const double b = v < 0.5 ? 1.0 : 2 * (1 - v);
      const double g = std::min(r, b);
      put(0, y, W + xx, r);
      put(1, y, W + xx, g);
      put(2, y, W + xx, b);
    }
  }
  const Box& bx = activation.box;
  auto red = [&](int yy, int xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<int>(H) || xx >= static_cast<int>(W)) return;
    put(0, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 1.0);
    put(1, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0.0);
    put(2, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0.0);
  };
  for (int xx = bx.x; xx < bx.x + bx.w; ++xx) {
    red(bx.y, xx);
    red(bx.y + bx.h - 1, xx);
  }
  for (int yy = bx.y; yy < bx.y + bx.h; ++yy) {
    red(yy, bx.x);
    red(yy, bx.x + bx.w - 1);
  }
  return out;
}

void write_explanation(const Explanation& explanation, const Tensor& image,
                       const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / (stem + ".csv"), std::ios::trunc);
  if (!csv) throw Error("cannot write explanation CSV into '" + dir.string() + "'");
  csv << "prototype,class,score,box_x,box_y,box_w,box_h\n";
  char score[32];
  for (const auto& a : explanation.activations) {
    std::snprintf(score, sizeof score, "%.10g", a.score);
    csv << a.prototype << ',' << a.prototype_class << ',' << score << ',' << a.box.x << ','
        << a.box.y << ',' << a.box.w << ',' << a.box.h << '\n';
    save_pnm(render_overlay(image, a), dir / (stem + "_p" + std::to_string(a.prototype) + ".ppm"));
  }
}

double Agreement::mean_off_diagonal() const {
  const std::size_t n = iou.size();
  if (n < 2) return 1.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j) s += iou[i][j];
    }
  }
  return s / static_cast<double>(n * (n - 1));
}

Agreement cross_client_agreement(const Tensor& image, const std::vector<ParamGroups>& clients,
                                 const ModelConfig& config, double percentile) {
  if (clients.size() < 2) throw ConfigError("agreement needs at least two clients");
  Agreement ag;
  for (const auto& params : clients) {
    const Explanation ex = explain(image, params, config, 0, percentile);
    const PrototypeActivation* top = ex.top_of_class(ex.predicted);
    if (!top) throw ConfigError("no prototype for the predicted class");
    ag.boxes.push_back(top->box);
  }
  const std::size_t n = clients.size();
  ag.iou.assign(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) ag.iou[i][j] = ag.iou[j][i] = iou(ag.boxes[i], ag.boxes[j]);
  }
  return ag;
}

}  // namespace protofed

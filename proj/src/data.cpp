#include "protofed/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "protofed/binary_io.hpp"

namespace protofed {

void SiteSpec::validate() const {
  if (!(healthy_fraction >= 0.0 && healthy_fraction <= 1.0)) {
    throw ConfigError("site " + std::to_string(id) + ": healthy fraction must lie in [0, 1]");
  }
  if (!(noise_std >= 0.0)) throw ConfigError("site " + std::to_string(id) + ": noise std must be >= 0");
  if (!(contrast > 0.0)) throw ConfigError("site " + std::to_string(id) + ": contrast must be > 0");
  if (samples < 1) throw ConfigError("site " + std::to_string(id) + ": needs at least one sample");
}

Tensor SiteDataset::gather(std::span<const std::size_t> indices) const {
  const Shape& s = images.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor out(Shape{indices.size(), s[1], s[2], s[3]});
  auto src = images.data();
  auto dst = out.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[k] * per), per,
                dst.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

std::vector<int> SiteDataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

SiteDataset SiteDataset::subset(std::span<const std::size_t> indices) const {
  SiteDataset out;
  out.images = gather(indices);
  out.labels = gather_labels(indices);
  for (auto i : indices) out.boxes.push_back(boxes.at(i));
  out.spec = spec;
  out.spec.samples = indices.size();
  return out;
}

std::size_t SiteDataset::count_label(int label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

namespace {

// Coarse random grid bilinearly interpolated to full resolution.
void smooth_field(std::vector<double>& plane, std::size_t H, std::size_t W, Rng& rng) {
  constexpr std::size_t G = 5;
  double grid[G][G];
  for (auto& row : grid) {
    for (auto& v : row) v = uniform(rng, 0.25, 0.55);
  }
  for (std::size_t y = 0; y < H; ++y) {
    const double gy = static_cast<double>(y) * (G - 1) / static_cast<double>(H - 1);
    const std::size_t y0 = std::min<std::size_t>(static_cast<std::size_t>(gy), G - 2);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double gx = static_cast<double>(x) * (G - 1) / static_cast<double>(W - 1);
      const std::size_t x0 = std::min<std::size_t>(static_cast<std::size_t>(gx), G - 2);
      const double fx = gx - static_cast<double>(x0);
      plane[y * W + x] = (1 - fy) * ((1 - fx) * grid[y0][x0] + fx * grid[y0][x0 + 1]) +
                         fy * ((1 - fx) * grid[y0 + 1][x0] + fx * grid[y0 + 1][x0 + 1]);
    }
  }
}

// Dark vessel-like strokes shared by both classes.
void draw_vessels(std::vector<double>& plane, std::size_t H, std::size_t W, Rng& rng) {
  const int strokes = 2 + static_cast<int>(uniform_index(rng, 2));
  for (int s = 0; s < strokes; ++s) {
    double x = uniform(rng, 0, static_cast<double>(W));
    double y = uniform(rng, 0, static_cast<double>(H));
    double angle = uniform(rng, 0, 2 * M_PI);
    const double depth = uniform(rng, 0.08, 0.16);
    const int length = static_cast<int>(H);
    for (int t = 0; t < length; ++t) {
      angle += normal(rng, 0.0, 0.08);
      x += std::cos(angle);
      y += std::sin(angle);
      const long px = std::lround(x), py = std::lround(y);
      if (px < 0 || py < 0 || px >= static_cast<long>(W) || py >= static_cast<long>(H)) continue;
      plane[static_cast<std::size_t>(py) * W + static_cast<std::size_t>(px)] -= depth;
    }
  }
}

// Bright blob cluster inside a glyph_size square at (gx, gy). Returns the
// exact support rectangle of the added intensity.
Box draw_glyph(std::vector<double>& plane, std::size_t H, std::size_t W, std::size_t glyph,
               int label, Rng& rng) {
  const int gx = static_cast<int>(uniform_index(rng, W - glyph + 1));
  const int gy = static_cast<int>(uniform_index(rng, H - glyph + 1));
  const int blobs = 4 + label;
  constexpr double radius = 3.5;
  const int g = static_cast<int>(glyph);
  int x0 = g, y0 = g, x1 = -1, y1 = -1;
  std::vector<double> stamp(glyph * glyph, 0.0);
  for (int b = 0; b < blobs; ++b) {
    const double cx = uniform(rng, radius, g - 1 - radius);
    const double cy = uniform(rng, radius, g - 1 - radius);
    const double amp = uniform(rng, 0.35, 0.55);
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        if (d2 > radius * radius) continue;
        stamp[static_cast<std::size_t>(y * g + x)] += amp * std::exp(-d2 / (2.0 * 2.0 * 2.0));
      }
    }
  }
  for (int y = 0; y < g; ++y) {
    for (int x = 0; x < g; ++x) {
      const double v = stamp[static_cast<std::size_t>(y * g + x)];
      if (v <= 0.0) continue;
      plane[static_cast<std::size_t>(gy + y) * W + static_cast<std::size_t>(gx + x)] += v;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  return {gx + x0, gy + y0, x1 - x0 + 1, y1 - y0 + 1};
}

}  // namespace

SiteDataset generate_site(const SiteSpec& spec, const ImageSpec& image) {
  spec.validate();
  if (image.height < 32 || image.width < 32) {
    throw ConfigError("synthetic images must be at least 32x32");
  }
  if (image.glyph_size < 7 || image.glyph_size > std::min(image.height, image.width)) {
    throw ConfigError("glyph size " + std::to_string(image.glyph_size) +
                      " does not fit the image (needs 7 <= size <= image extent)");
  }
  if (image.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  const std::size_t n = spec.samples, H = image.height, W = image.width, C = image.channels;

  // Label assignment: round(n * healthy) healthy samples, the rest spread
  // evenly over the disease classes, then shuffled.
  const std::size_t healthy = image.num_classes == 1
                                  ? n
                                  : static_cast<std::size_t>(std::llround(
                                        static_cast<double>(n) * spec.healthy_fraction));
  std::vector<int> labels(n, 0);
  for (std::size_t i = healthy; i < n; ++i) {
    labels[i] = 1 + static_cast<int>((i - healthy) % (image.num_classes - 1));
  }
  Rng label_rng(derive_seed(spec.seed, {0}));
  std::shuffle(labels.begin(), labels.end(), label_rng);

  SiteDataset ds;
  ds.spec = spec;
  ds.images = Tensor(Shape{n, C, H, W});
  ds.labels = labels;
  ds.boxes.resize(n);
  std::vector<double> plane(H * W);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(spec.seed, {1, i}));
    smooth_field(plane, H, W, rng);
    draw_vessels(plane, H, W, rng);
    if (labels[i] > 0) ds.boxes[i] = draw_glyph(plane, H, W, image.glyph_size, labels[i], rng);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t q = 0; q < H * W; ++q) {
        double v = spec.contrast * (plane[q] - 0.5) + 0.5 + spec.brightness;
        if (spec.noise_std > 0.0) v += normal(rng, 0.0, spec.noise_std);
        ds.images[(i * C + c) * H * W + q] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return ds;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::span<const int> labels, double fraction, std::uint64_t seed) {
  if (labels.size() < 5) throw DataError("train/val split needs at least 5 samples");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  int max_label = *std::max_element(labels.begin(), labels.end());
  std::vector<std::size_t> train, val;
  for (int c = 0; c <= max_label; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                      " sample(s); a split needs at least 2 per class");
    }
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    std::shuffle(members.begin(), members.end(), rng);
    auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    k = std::clamp<std::size_t>(k, 1, members.size() - 1);
    train.insert(train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(k));
    val.insert(val.end(), members.begin() + static_cast<std::ptrdiff_t>(k), members.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

Split split_train_val(const SiteDataset& dataset, double fraction, std::uint64_t seed) {
  auto [train, val] = split_indices(dataset.labels, fraction, seed);
  return {dataset.subset(train), dataset.subset(val)};
}

namespace {

std::vector<std::vector<std::size_t>> class_pools(std::span<const int> labels,
                                                  std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> pools(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    }
    pools[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (pools[c].empty()) throw DataError("class " + std::to_string(c) + " has no samples");
  }
  return pools;
}

}  // namespace

std::size_t balanced_epoch_length(std::span<const int> labels, std::size_t num_classes,
                                  std::size_t batch_size) {
  if (batch_size < num_classes) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " smaller than class count " +
                      std::to_string(num_classes));
  }
  auto pools = class_pools(labels, num_classes);
  std::size_t n_min = pools[0].size();
  for (const auto& p : pools) n_min = std::min(n_min, p.size());
  const std::size_t per_class = batch_size / num_classes;
  return (n_min + per_class - 1) / per_class;
}

std::vector<std::vector<std::size_t>> balanced_batches(std::span<const int> labels,
                                                       std::size_t num_classes,
                                                       std::size_t batch_size,
                                                       std::uint64_t seed) {
  const std::size_t batches = balanced_epoch_length(labels, num_classes, batch_size);
  auto pools = class_pools(labels, num_classes);
  Rng rng(seed);
  std::vector<std::size_t> cursor(num_classes, 0);
  for (auto& p : pools) std::shuffle(p.begin(), p.end(), rng);

  auto draw = [&](std::size_t c) {
    if (cursor[c] == pools[c].size()) {
      std::shuffle(pools[c].begin(), pools[c].end(), rng);
      cursor[c] = 0;
    }
    return pools[c][cursor[c]++];
  };

  const std::size_t base = batch_size / num_classes, extra = batch_size % num_classes;
  std::vector<std::vector<std::size_t>> epoch(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    auto& batch = epoch[b];
    batch.reserve(batch_size);
    for (std::size_t c = 0; c < num_classes; ++c) {
      // The `extra` leftover slots rotate over classes from batch to batch.
      const bool bonus = ((c + num_classes - b % num_classes) % num_classes) < extra;
      const std::size_t count = base + (bonus ? 1 : 0);
      for (std::size_t k = 0; k < count; ++k) batch.push_back(draw(c));
    }
  }
  return epoch;
}

void augment_batch(Tensor& batch, Rng& rng) {
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  std::vector<double> tmp(H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const bool hflip = uniform_index(rng, 2) == 1;
    const bool vflip = uniform_index(rng, 2) == 1;
    const std::size_t rot = H == W ? uniform_index(rng, 4) : 0;
    const double jitter = uniform(rng, -0.05, 0.05);
    for (std::size_t c = 0; c < C; ++c) {
      double* plane = batch.data().data() + (n * C + c) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          std::size_t sy = vflip ? H - 1 - y : y;
          std::size_t sx = hflip ? W - 1 - x : x;
          for (std::size_t r = 0; r < rot; ++r) {
            const std::size_t ty = sx, tx = W - 1 - sy;
            sy = ty;
            sx = tx;
          }
          tmp[y * W + x] = std::clamp(plane[sy * W + sx] + jitter, 0.0, 1.0);
        }
      }
      std::copy(tmp.begin(), tmp.end(), plane);
    }
  }
}

void TaskConfig::validate() const {
  if (sites.empty()) throw ConfigError("task needs at least one training site");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  for (const auto& s : sites) s.validate();
  test.validate();
}

TaskConfig default_task(std::uint64_t seed) {
  TaskConfig task;
  struct Row {
    std::size_t n;
    double healthy, brightness, contrast, noise;
  };
  const Row rows[] = {{600, 0.76, 0.0, 1.0, 0.03},
                      {500, 0.55, 0.08, 0.8, 0.05},
                      {400, 0.81, -0.06, 1.2, 0.02},
                      {300, 0.84, 0.04, 0.9, 0.06}};
  int id = 1;
  for (const auto& r : rows) {
    task.sites.push_back({id, r.n, r.healthy, r.brightness, r.contrast, r.noise,
                          derive_seed(seed, {100 + static_cast<std::uint64_t>(id)})});
    ++id;
  }
  task.test = {id, 400, 0.8151, -0.03, 1.1, 0.04, derive_seed(seed, {100 + static_cast<std::uint64_t>(id)})};
  return task;
}

TaskData build_task(const TaskConfig& task) {
  task.validate();
  TaskData data;
  for (const auto& spec : task.sites) {
    data.clients.push_back(
        split_train_val(generate_site(spec, task.image), task.train_fraction, derive_seed(spec.seed, {7})));
  }
  data.test = generate_site(task.test, task.image);
  return data;
}

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

// Reads one header integer, skipping whitespace and '#' comments.
std::size_t header_int(const std::vector<std::uint8_t>& bytes, std::size_t& pos, const char* what) {
  while (pos < bytes.size()) {
    if (is_space(bytes[pos])) {
      ++pos;
    } else if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  std::size_t value = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    value = value * 10 + (bytes[pos] - '0');
    if (value > 65535) throw FormatError(std::string("PNM ") + what + " too large", start);
    ++pos;
  }
  if (pos == start) throw FormatError(std::string("PNM header: expected ") + what, start);
  return value;
}

}  // namespace

Tensor decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("not a binary PGM/PPM (expected P5 or P6 magic)", 0);
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  const std::size_t width = header_int(bytes, pos, "width");
  const std::size_t height = header_int(bytes, pos, "height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = header_int(bytes, pos, "max value");
  if (width == 0 || height == 0) throw FormatError("PNM image has zero extent", maxval_at);
  if (maxval != 255) {
    throw FormatError("only 8-bit PNM with max value 255 is supported, got " +
                      std::to_string(maxval), maxval_at);
  }
  if (pos >= bytes.size() || !is_space(bytes[pos])) {
    throw FormatError("PNM header must end with a single whitespace byte", pos);
  }
  ++pos;
  const std::size_t need = width * height * channels;
  if (bytes.size() - pos < need) {
    throw FormatError("PNM pixel data truncated: need " + std::to_string(need) + " bytes, have " +
                      std::to_string(bytes.size() - pos), bytes.size());
  }
  Tensor out(Shape{1, channels, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        out.at(0, c, y, x) = bytes[pos + (y * width + x) * channels + c] / 255.0;
      }
    }
  }
  return out;
}

Tensor load_pnm(const std::filesystem::path& path) { return decode_pnm(bin::read_file(path)); }

std::vector<std::uint8_t> encode_pnm(const Tensor& image) {
  Tensor img = image;
  if (img.rank() == 4) {
    if (img.dim(0) != 1) throw ConfigError("save_pnm expects a single image");
    img = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
  }
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
    throw ConfigError("save_pnm expects 1 or 3 channels, got " + shape_to_string(image.shape()));
  }
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::string header = std::string(C == 1 ? "P5" : "P6") + "\n" + std::to_string(W) + " " +
                       std::to_string(H) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + C * H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < C; ++c) {
        const double v = std::clamp(img[(c * H + y) * W + x], 0.0, 1.0);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
      }
    }
  }
  return out;
}

void save_pnm(const Tensor& image, const std::filesystem::path& path) {
  bin::write_file(path, encode_pnm(image));
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  out << "path,label,site,box_x,box_y,box_w,box_h\n";
  for (const auto& r : rows) {
    out << r.path << ',' << r.label << ',' << r.site << ',';
    if (r.box) {
      out << r.box->x << ',' << r.box->y << ',' << r.box->w << ',' << r.box->h;
    } else {
      out << ",,,";
    }
    out << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "path,label,site,box_x,box_y,box_w,box_h") {
    throw DataError("manifest '" + path.string() + "' has an unexpected header");
  }
  std::vector<ManifestRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 7) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 7 fields");
    }
    try {
      ManifestRow row;
      row.path = fields[0];
      row.label = std::stoi(fields[1]);
      row.site = std::stoi(fields[2]);
      if (!fields[3].empty()) {
        row.box = Box{std::stoi(fields[3]), std::stoi(fields[4]), std::stoi(fields[5]),
                      std::stoi(fields[6])};
      }
      rows.push_back(std::move(row));
    } catch (const std::logic_error&) {
      throw DataError("manifest line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

void write_site(const SiteDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestRow> rows;
  const std::size_t width = std::to_string(dataset.size()).size();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::string idx = std::to_string(i);
    idx.insert(0, width - idx.size(), '0');
    std::string name = "img_" + idx + (dataset.images.dim(1) == 1 ? ".pgm" : ".ppm");
    const std::size_t one = i;
    save_pnm(dataset.gather(std::span<const std::size_t>(&one, 1)), dir / name);
    rows.push_back({name, dataset.labels[i], dataset.spec.id, dataset.boxes[i]});
  }
  write_manifest(dir / "manifest.csv", rows);
}

SiteDataset load_site(const std::filesystem::path& manifest, const ImageSpec& image) {
  auto rows = read_manifest(manifest);
  if (rows.empty()) throw DataError("manifest '" + manifest.string() + "' lists no images");
  const auto base = manifest.parent_path();
  SiteDataset ds;
  ds.images = Tensor(Shape{rows.size(), image.channels, image.height, image.width});
  const std::size_t per = image.channels * image.height * image.width;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Tensor img = load_pnm(base / rows[i].path);
    if (img.shape() != Shape{1, image.channels, image.height, image.width}) {
      throw DataError("image '" + rows[i].path + "' has shape " + shape_to_string(img.shape()));
    }
    std::copy(img.data().begin(), img.data().end(),
              ds.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    ds.labels.push_back(rows[i].label);
    ds.boxes.push_back(rows[i].box);
  }
  ds.spec.id = rows.front().site;
  ds.spec.samples = rows.size();
  return ds;
}

}  // namespace protofed

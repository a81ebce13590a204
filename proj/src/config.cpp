#include "protofed/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace protofed {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::size_t to_size(const std::string& v) { return static_cast<std::size_t>(to_u64(v)); }

bool to_bool(const std::string& v) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty entry in list '" + v + "'");
    out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i) os << (i ? "," : "") << items[i];
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

struct Section {
  std::string name;
  std::vector<Field> fields;
};

// Field accessors generated from a member projection.
template <typename Proj>
Field size_field(std::string key, Proj proj) {
  return {std::move(key), [proj](RunConfig& c, const std::string& v) { proj(c) = to_size(v); },
          [proj](const RunConfig& c) { return std::to_string(proj(c)); }};
}
template <typename Proj>
Field double_field(std::string key, Proj proj) {
  return {std::move(key), [proj](RunConfig& c, const std::string& v) { proj(c) = to_double(v); },
          [proj](const RunConfig& c) { return fmt_double(proj(c)); }};
}
template <typename Proj>
Field bool_field(std::string key, Proj proj) {
  return {std::move(key), [proj](RunConfig& c, const std::string& v) { proj(c) = to_bool(v); },
          [proj](const RunConfig& c) { return proj(c) ? "true" : "false"; }};
}

template <typename Site>
std::vector<Field> site_fields(Site site) {
  return {
      size_field("samples", [site](auto& c) -> auto& { return site(c).samples; }),
      double_field("healthy_fraction", [site](auto& c) -> auto& { return site(c).healthy_fraction; }),
      double_field("brightness", [site](auto& c) -> auto& { return site(c).brightness; }),
      double_field("contrast", [site](auto& c) -> auto& { return site(c).contrast; }),
      double_field("noise_std", [site](auto& c) -> auto& { return site(c).noise_std; }),
      {"seed", [site](RunConfig& c, const std::string& v) { site(c).seed = to_u64(v); },
       [site](const RunConfig& c) { return std::to_string(site(c).seed); }},
  };
}

std::vector<Section> sections(std::size_t num_sites) {
  std::vector<Section> out;
  out.push_back({"run",
                 {
                     {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
                      [](const RunConfig& c) { return std::to_string(c.seed); }},
                     {"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
                      [](const RunConfig& c) { return c.output_dir.string(); }},
                     {"data_dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; },
                      [](const RunConfig& c) { return c.data_dir.string(); }},
                     {"variant", [](RunConfig& c, const std::string& v) { c.variant = v; },
                      [](const RunConfig& c) { return c.variant; }},
                     {"grid", [](RunConfig& c, const std::string& v) { c.grid = to_list(v); },
                      [](const RunConfig& c) { return join(c.grid); }},
                 }});
  out.push_back({"fed",
                 {
                     size_field("num_clients", [](auto& c) -> auto& { return c.fed.num_clients; }),
                     size_field("rounds", [](auto& c) -> auto& { return c.fed.rounds; }),
                     size_field("local_epochs", [](auto& c) -> auto& { return c.fed.local_epochs; }),
                     double_field("learning_rate", [](auto& c) -> auto& { return c.fed.learning_rate; }),
                     size_field("batch_size", [](auto& c) -> auto& { return c.fed.batch_size; }),
                     {"optimizer",
                      [](RunConfig& c, const std::string& v) { c.fed.optimizer = parse_optimizer(v); },
                      [](const RunConfig& c) { return to_string(c.fed.optimizer); }},
                     bool_field("communicate_adapters", [](auto& c) -> auto& { return c.fed.communicate_adapters; }),
                     bool_field("communicate_prototypes", [](auto& c) -> auto& { return c.fed.communicate_prototypes; }),
                     bool_field("communicate_head", [](auto& c) -> auto& { return c.fed.communicate_head; }),
                     bool_field("use_prox", [](auto& c) -> auto& { return c.fed.use_prox; }),
                     bool_field("reset_optimizer", [](auto& c) -> auto& { return c.fed.reset_optimizer; }),
                     bool_field("allow_partial", [](auto& c) -> auto& { return c.fed.allow_partial; }),
                     bool_field("augment", [](auto& c) -> auto& { return c.fed.augment; }),
                     size_field("workers", [](auto& c) -> auto& { return c.fed.workers; }),
                     bool_field("dump_payloads", [](auto& c) -> auto& { return c.fed.dump_payloads; }),
                 }});
  out.push_back({"model",
                 {
                     {"channels",
                      [](RunConfig& c, const std::string& v) {
                        c.model.backbone.channels.clear();
                        for (const auto& s : to_list(v)) c.model.backbone.channels.push_back(to_size(s));
                      },
                      [](const RunConfig& c) { return join(c.model.backbone.channels); }},
                     bool_field("pool_last_block", [](auto& c) -> auto& { return c.model.backbone.pool_last_block; }),
                     double_field("input_offset", [](auto& c) -> auto& { return c.model.backbone.input_offset; }),
                     {"freeze_mode",
                      [](RunConfig& c, const std::string& v) { c.model.backbone.freeze_mode = parse_freeze_mode(v); },
                      [](const RunConfig& c) { return to_string(c.model.backbone.freeze_mode); }},
                     size_field("warmup_steps", [](auto& c) -> auto& { return c.model.backbone.warmup_steps; }),
                     double_field("warmup_learning_rate", [](auto& c) -> auto& { return c.model.backbone.warmup_learning_rate; }),
                     size_field("warmup_samples", [](auto& c) -> auto& { return c.model.backbone.warmup_samples; }),
                     size_field("adapter_reduction", [](auto& c) -> auto& { return c.model.adapter_reduction; }),
                     size_field("prototypes_per_class", [](auto& c) -> auto& { return c.model.prototypes_per_class; }),
                     size_field("prototype_height", [](auto& c) -> auto& { return c.model.prototype_height; }),
                     size_field("prototype_width", [](auto& c) -> auto& { return c.model.prototype_width; }),
                 }});
  out.push_back({"loss",
                 {
                     double_field("beta", [](auto& c) -> auto& { return c.loss.beta; }),
                     double_field("lambda_clst", [](auto& c) -> auto& { return c.loss.lambda_clst; }),
                     double_field("lambda_sep", [](auto& c) -> auto& { return c.loss.lambda_sep; }),
                     double_field("gamma", [](auto& c) -> auto& { return c.loss.gamma; }),
                     double_field("mu1", [](auto& c) -> auto& { return c.loss.mu1; }),
                     double_field("mu2", [](auto& c) -> auto& { return c.loss.mu2; }),
                     bool_field("l1_on_prototypes", [](auto& c) -> auto& { return c.loss.l1_on_prototypes; }),
                     double_field("sep_cap", [](auto& c) -> auto& { return c.loss.sep_cap; }),
                 }});
  out.push_back({"data",
                 {
                     size_field("channels", [](auto& c) -> auto& { return c.task.image.channels; }),
                     size_field("height", [](auto& c) -> auto& { return c.task.image.height; }),
                     size_field("width", [](auto& c) -> auto& { return c.task.image.width; }),
                     size_field("num_classes", [](auto& c) -> auto& { return c.task.image.num_classes; }),
                     size_field("glyph_size", [](auto& c) -> auto& { return c.task.image.glyph_size; }),
                     double_field("train_fraction", [](auto& c) -> auto& { return c.task.train_fraction; }),
                 }});
  for (std::size_t k = 0; k < num_sites; ++k) {
    out.push_back({"site." + std::to_string(k + 1),
                   site_fields([k](auto& c) -> auto& { return c.task.sites.at(k); })});
  }
  out.push_back({"test", site_fields([](auto& c) -> auto& { return c.task.test; })});
  out.push_back({"interpret",
                 {
                     size_field("top_k", [](auto& c) -> auto& { return c.interpret.top_k; }),
                     double_field("percentile", [](auto& c) -> auto& { return c.interpret.percentile; }),
                 }});
  return out;
}

struct Entry {
  std::string value;
  std::string where;
};
using Entries = std::map<std::string, std::map<std::string, Entry>>;

Entries parse_entries(const std::string& text, const std::string& origin) {
  Entries entries;
  std::istringstream in(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string line = raw.substr(0, raw.find_first_of("#;"));
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    if (section.empty()) throw ConfigError(where + ": key outside any [section]");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": missing key");
    auto& slot = entries[section];
    if (slot.contains(key)) {
      throw ConfigError(where + ": '" + key + "' repeats in [" + section + "] (first at " +
                        slot[key].where + ")");
    }
    slot[key] = {trim(std::string_view(line).substr(eq + 1)), where};
  }
  return entries;
}

void apply_overrides(Entries& entries, const ConfigOverrides& overrides) {
  for (const auto& [path, value] : overrides) {
    const auto dot = path.rfind('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
      throw ConfigError("override '" + path + "' must look like section.key");
    }
    entries[path.substr(0, dot)][path.substr(dot + 1)] = {value, "override " + path};
  }
}

// Pops one entry and applies it; errors carry the entry's origin.
template <typename Fn>
void take(Entries& entries, const std::string& section, const std::string& key, Fn fn) {
  auto s = entries.find(section);
  if (s == entries.end()) return;
  auto e = s->second.find(key);
  if (e == s->second.end()) return;
  try {
    fn(e->second.value);
  } catch (const ConfigError& err) {
    throw ConfigError(e->second.where + ": [" + section + "] " + key + ": " + err.what());
  }
  s->second.erase(e);
}

RunConfig build(Entries entries) {
  RunConfig c;
  take(entries, "run", "seed", [&](const std::string& v) { c.seed = to_u64(v); });
  c.fed.seed = c.seed;
  c.task = default_task(c.seed);
  take(entries, "fed", "num_clients", [&](const std::string& v) { c.fed.num_clients = to_size(v); });
  if (c.fed.num_clients != c.task.sites.size()) {
    const SiteSpec last = c.task.sites.back();
    c.task.sites.resize(c.fed.num_clients, last);
    for (std::size_t k = 0; k < c.task.sites.size(); ++k) {
      c.task.sites[k].id = static_cast<int>(k + 1);
      c.task.sites[k].seed = derive_seed(c.seed, {100 + k + 1});
    }
    c.task.test.id = static_cast<int>(c.task.sites.size() + 1);
  }

  for (const auto& sec : sections(c.task.sites.size())) {
    for (const auto& f : sec.fields) {
      take(entries, sec.name, f.key, [&](const std::string& v) { f.set(c, v); });
    }
  }
  for (const auto& [section, keys] : entries) {
    if (keys.empty()) continue;
    const auto& [key, entry] = *keys.begin();
    bool known = false;
    for (const auto& sec : sections(c.task.sites.size())) known = known || sec.name == section;
    throw ConfigError(entry.where + ": unknown " +
                      (known ? "key '" + key + "' in [" + section + "]" : "section [" + section + "]"));
  }

  c.model.num_classes = c.task.image.num_classes;
  c.model.backbone.input_channels = c.task.image.channels;
  c.model.backbone.input_height = c.task.image.height;
  c.model.backbone.input_width = c.task.image.width;
  c.validate();
  return c;
}

}  // namespace

std::string site_directory(const SiteSpec& spec, bool test) {
  return test ? "test" : "site" + std::to_string(spec.id);
}

void RunConfig::validate() const {
  fed.validate();
  model.validate();
  loss.validate();
  task.validate();
  if (task.sites.size() != fed.num_clients) {
    throw ConfigError("num_clients is " + std::to_string(fed.num_clients) + " but " +
                      std::to_string(task.sites.size()) + " sites are configured");
  }
  if (fed.seed != seed) throw ConfigError("fed seed differs from the run seed");
  if (!variant.empty()) find_variant(variant);
  if (grid.empty()) throw ConfigError("variant grid is empty");
  for (const auto& v : grid) find_variant(v);
  if (!(interpret.percentile >= 0.0 && interpret.percentile <= 100.0)) {
    throw ConfigError("percentile must lie in [0, 100]");
  }
  if (output_dir.empty()) throw ConfigError("output_dir is empty");
}

RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides,
                       const std::string& origin) {
  Entries entries = parse_entries(text, origin);
  apply_overrides(entries, overrides);
  return build(std::move(entries));
}

RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides, path.string());
}

RunConfig default_config(const ConfigOverrides& overrides) {
  return parse_config("", overrides, "<defaults>");
}

std::string render_config(const RunConfig& config) {
  std::ostringstream os;
  bool first = true;
  for (const auto& sec : sections(config.task.sites.size())) {
    os << (first ? "" : "\n") << '[' << sec.name << "]\n";
    first = false;
    for (const auto& f : sec.fields) os << f.key << " = " << f.get(config) << '\n';
  }
  return os.str();
}

void write_config(const RunConfig& config, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << render_config(config);
}

ImageSpec image_spec(const RunConfig& config) { return config.task.image; }

TaskData load_task(const RunConfig& config) {
  if (config.data_dir.empty()) return build_task(config.task);
  const TaskConfig& task = config.task;
  auto load = [&](const SiteSpec& spec, bool test) {
    const auto manifest = config.data_dir / site_directory(spec, test) / "manifest.csv";
    if (!std::filesystem::exists(manifest)) {
      throw DataError("missing manifest '" + manifest.string() + "'; run partition first");
    }
    SiteDataset ds = load_site(manifest, task.image);
    if (ds.size() != spec.samples) {
      throw DataError("'" + manifest.string() + "' lists " + std::to_string(ds.size()) +
                      " images, config expects " + std::to_string(spec.samples));
    }
    ds.spec = spec;
    return ds;
  };
  TaskData data;
  for (const auto& spec : task.sites) {
    data.clients.push_back(
        split_train_val(load(spec, false), task.train_fraction, derive_seed(spec.seed, {7})));
  }
  data.test = load(task.test, true);
  return data;
}

}  // namespace protofed

#include "protofed/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "protofed/interpret.hpp"
#include "protofed/log.hpp"

namespace protofed {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

bool non_empty_dir(const std::filesystem::path& p) {
  return std::filesystem::is_directory(p) && !std::filesystem::is_empty(p);
}

}  // namespace

// -- partition -----------------------------------------------------------------

std::vector<std::filesystem::path> cmd_partition(const RunConfig& config,
                                                 const std::filesystem::path& out, bool force) {
  config.validate();
  if (std::filesystem::exists(out) && !std::filesystem::is_directory(out)) {
    throw ConfigError("'" + out.string() + "' exists and is not a directory");
  }
  if (non_empty_dir(out) && !force) {
    throw ConfigError("'" + out.string() + "' is not empty; pass --force to overwrite");
  }
  std::vector<std::filesystem::path> manifests;
  auto emit = [&](const SiteSpec& spec, bool test) {
    const auto dir = out / site_directory(spec, test);
    if (force && std::filesystem::exists(dir)) std::filesystem::remove_all(dir);
    write_site(generate_site(spec, config.task.image), dir);
    manifests.push_back(dir / "manifest.csv");
    log::info("wrote " + std::to_string(spec.samples) + " images to " + dir.string());
  };
  for (const auto& spec : config.task.sites) emit(spec, false);
  emit(config.task.test, true);
  RunConfig resolved = config;
  resolved.data_dir = out;
  write_config(resolved, out / "config.ini");
  return manifests;
}

// -- train ---------------------------------------------------------------------

std::vector<VariantResult> cmd_train(const RunConfig& config, bool grid) {
  config.validate();
  const TaskData data = load_task(config);
  const ParamGroups init = initial_params(config.model, image_spec(config), config.seed);
  const auto& out = config.output_dir;

  if (!grid) {
    FedConfig fed = config.fed;
    LossWeights weights = config.loss;
    if (!config.variant.empty()) apply_variant(find_variant(config.variant), fed, weights);
    write_config(config, out / "config.ini");
    const RunReport run = run_federation(fed, config.model, weights, data, init, out);
    log::info("final mean test accuracy " + fmt(run.final_mean_test_acc) + "; best validation at round " +
              std::to_string(run.best_round));
    return {{config.variant.empty() ? "custom" : config.variant, run.final_test_acc,
             run.final_mean_test_acc, run.payload_bytes, run.checkpoint_bytes}};
  }

  write_config(config, out / "config.ini");
  for (const auto& name : config.grid) {
    RunConfig sub = config;
    sub.variant = name;
    sub.output_dir = out / name;
    write_config(sub, sub.output_dir / "config.ini");
  }
  return compare_variants(config.grid, config.fed, config.model, config.loss, data, init, out);
}

// -- gradcheck -----------------------------------------------------------------

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(rng, lo, hi);
  return t;
}

// Values bounded away from zero so |x| and relu stay differentiable under
// the finite-difference step.
Tensor away_from_zero(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double m = uniform(rng, 0.1, 1.0);
    t[i] = uniform(rng, 0.0, 1.0) < 0.5 ? -m : m;
  }
  return t;
}

// Distinct values in random order, so maxima and minima are unique.
Tensor distinct(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 0.5;
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i];
  return t;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.backbone.input_channels = 1;
  m.backbone.input_height = 16;
  m.backbone.input_width = 16;
  m.backbone.channels = {8, 8};
  m.backbone.freeze_mode = FreezeMode::FrozenRandom;
  m.prototypes_per_class = 2;
  return m;
}

}  // namespace

std::vector<NamedCheck> gradcheck_suite(std::uint64_t seed, double step, double tolerance) {
  Rng rng(derive_seed(seed, {900}));
  std::vector<NamedCheck> checks;
  auto run = [&](const std::string& name, const NamedTensors& point, TapeExpression expr) {
    checks.push_back({name, grad_check(tape_objective(std::move(expr)), point, step, tolerance)});
  };
  // Tensor-valued ops are reduced to sum (y - r)^2 with r = y(point) + small
  // noise, which keeps the objective comparable to its gradient so
  // finite-difference roundoff stays far below the tolerance.
  using OpFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
  auto op_check = [&](const std::string& name, const NamedTensors& point, OpFn op) {
    ad::Tape probe;
    std::vector<ad::Var> leaves;
    for (const auto& [n, t] : point) leaves.push_back(probe.constant(t));
    Tensor ref = probe.value(op(probe, leaves));
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += uniform(rng, -0.05, 0.05);
    run(name, point, [op, ref](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::sq_diff_sum(t, op(t, v), ref);
    });
  };

  {
    NamedTensors p{{"input", random_tensor(rng, {2, 3, 5, 5}, -1, 1)},
                   {"kernel", random_tensor(rng, {4, 3, 3, 3}, -1, 1)},
                   {"bias", random_tensor(rng, {4}, -1, 1)}};
    op_check("conv2d", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::conv2d(t, v[0], v[1], v[2], {1, 1});
    });
    op_check("conv2d_stride2", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::conv2d(t, v[0], v[1], v[2], {2, 0});
    });
  }
  {
    NamedTensors p{{"input", away_from_zero(rng, {2, 3, 4, 4})}};
    op_check("relu", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::relu(t, v[0]);
    });
  }
  {
    NamedTensors p{{"input", distinct(rng, {2, 2, 4, 4})}};
    op_check("maxpool2d", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::maxpool2d(t, v[0], 2, 2);
    });
  }
  {
    NamedTensors p{{"input", random_tensor(rng, {3, 5}, -1, 1)},
                   {"weights", random_tensor(rng, {5, 4}, -1, 1)}};
    op_check("linear", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::linear(t, v[0], v[1]);
    });
  }
  {
    NamedTensors p{{"a", random_tensor(rng, {2, 3}, -1, 1)}, {"b", random_tensor(rng, {2, 3}, -1, 1)}};
    op_check("add", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::add(t, v[0], v[1]);
    });
    op_check("scale", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::scale(t, v[0], -1.7);
    });
  }
  for (std::size_t k : {1, 2}) {
    NamedTensors p{{"feature", random_tensor(rng, {2, 3, 4, 4}, 0, 1)},
                   {"templates", random_tensor(rng, {3, 3, k, k}, 0, 1)}};
    op_check("sliding_sq_l2_" + std::to_string(k) + "x" + std::to_string(k), p,
        [](ad::Tape& t, const std::vector<ad::Var>& v) {
          return ad::sliding_sq_l2(t, v[0], v[1]);
        });
  }
  {
    NamedTensors p{{"maps", distinct(rng, {2, 3, 3, 3})}};
    op_check("spatial_min", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::spatial_min(t, v[0]);
    });
  }
  {
    NamedTensors p{{"a", away_from_zero(rng, {3, 4})}};
    const Tensor ref = random_tensor(rng, {3, 4}, -1, 1);
    run("sum_squares", p, [](ad::Tape& t, const std::vector<ad::Var>& v) { return ad::sum_squares(t, v[0]); });
    run("abs_sum", p, [](ad::Tape& t, const std::vector<ad::Var>& v) { return ad::abs_sum(t, v[0]); });
    run("sq_diff_sum", p, [ref](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::sq_diff_sum(t, v[0], ref);
    });
  }
  {
    NamedTensors p{{"a", random_tensor(rng, {2, 2}, -1, 1)}, {"b", random_tensor(rng, {3}, -1, 1)}};
    run("linear_combination", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      const ad::Var terms[] = {ad::sum_squares(t, v[0]), ad::sum_squares(t, v[1])};
      const double coeffs[] = {0.7, -1.3};
      return ad::linear_combination(t, terms, coeffs);
    });
  }
  {
    NamedTensors p{{"logits", random_tensor(rng, {4, 3}, -2, 2)}};
    const std::vector<int> labels{0, 2, 1, 2};
    run("cross_entropy", p, [labels](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::cross_entropy(t, v[0], labels);
    });
  }
  {
    NamedTensors p{{"values", distinct(rng, {3, 4})}};
    for (auto& x : p.get("values").data()) x += 1.0;
    const std::vector<int> labels{0, 1, 1};
    const std::vector<int> classes{0, 0, 1, 1};
    for (int correct : {1, 0}) {
      run(correct ? "class_min_correct" : "class_min_wrong", p,
          [labels, classes, correct](ad::Tape& t, const std::vector<ad::Var>& v) {
            return ad::class_restricted_min(t, v[0], labels, classes, correct != 0);
          });
    }
    run("class_min_wrong_capped", p, [labels, classes](ad::Tape& t, const std::vector<ad::Var>& v) {
      return ad::class_restricted_min(t, v[0], labels, classes, false, 1.0);
    });
  }
  {
    NamedTensors p{{"h", random_tensor(rng, {2, 4, 3, 3}, -1, 1)},
                   {"down", random_tensor(rng, {2, 4, 1, 1}, -1, 1)},
                   {"up", random_tensor(rng, {4, 2, 1, 1}, -1, 1)}};
    op_check("adapter", p, [](ad::Tape& t, const std::vector<ad::Var>& v) {
      return adapter_forward(t, v[0], v[1], v[2]);
    });
  }

  // Composite local loss on the tiny model: every term active.
  {
    const ModelConfig model = tiny_model();
    ParamGroups params = init_params(model, derive_seed(seed, {901}));
    for (auto& [name, t] : params.alpha) {
      if (name.find("up") != std::string::npos) t = random_tensor(rng, t.shape(), -0.3, 0.3);
    }
    Tensor& head = params.phi.get(names::kHead);
    for (std::size_t i = 0; i < head.size(); ++i) head[i] += uniform(rng, -0.2, 0.2);

    NamedTensors alpha_ref = params.alpha, phi_ref = params.phi;
    for (auto& [name, t] : alpha_ref) t += random_tensor(rng, t.shape(), -0.1, 0.1);
    for (auto& [name, t] : phi_ref) t += random_tensor(rng, t.shape(), -0.1, 0.1);

    const Tensor x = random_tensor(rng, {3, 1, 16, 16}, 0, 1);
    const std::vector<int> labels{0, 1, 1};
    LossWeights weights;
    weights.beta = 0.05;
    weights.gamma = 0.01;
    weights.mu1 = 0.5;
    weights.mu2 = 0.5;

    NamedTensors point;
    for (const auto& [name, t] : params.alpha) point.add(name, t);
    for (const auto& [name, t] : params.phi) point.add(name, t);
    const std::size_t blocks = model.backbone.num_blocks();
    run("local_loss", point,
        [=](ad::Tape& t, const std::vector<ad::Var>& v) {
          ModelVars vars;
          for (std::size_t b = 0; b < blocks; ++b) {
            vars.conv_weight.push_back(t.constant(params.omega.get(names::conv_weight(b))));
            vars.conv_bias.push_back(t.constant(params.omega.get(names::conv_bias(b))));
            vars.adapter_down.push_back(v[2 * b]);
            vars.adapter_up.push_back(v[2 * b + 1]);
          }
          vars.prototypes = v[2 * blocks];
          vars.head = v[2 * blocks + 1];
          const ForwardVars fwd = forward(t, vars, t.constant(x), model, true);
          const GlobalReference globals{&alpha_ref, &phi_ref};
          return local_loss(t, fwd, vars, params, labels, model.prototype_classes(), globals,
                            weights)
              .total;
        });
  }
  return checks;
}

bool cmd_gradcheck(const GradcheckOptions& options, std::ostream& out) {
  if (!(options.step > 0.0)) throw ConfigError("finite-difference step must be > 0");
  if (!(options.tolerance > 0.0)) throw ConfigError("tolerance must be > 0");
  if (options.seeds < 1) throw ConfigError("need at least one seed");
  bool ok = true;
  double worst = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < options.seeds; ++s) {
    const std::uint64_t seed = options.first_seed + s;
    for (const auto& check : gradcheck_suite(seed, options.step, options.tolerance)) {
      const auto& r = check.report;
      ++count;
      worst = std::max(worst, r.max_rel_error);
      char line[160];
      std::snprintf(line, sizeof line, "%-24s seed %-4llu max rel err %.3e  %s", check.name.c_str(),
                    static_cast<unsigned long long>(seed), r.max_rel_error, r.passed ? "ok" : "FAIL");
      out << line << '\n';
      if (r.passed) continue;
      ok = false;
      if (!r.diagnostic.empty()) out << "    " << r.diagnostic << '\n';
      for (const auto& p : r.params) {
        if (p.passed) continue;
        std::snprintf(line, sizeof line, "    %s[%zu]: analytic %.12e numeric %.12e (rel %.3e)",
                      p.name.c_str(), p.worst_index, p.worst_analytic, p.worst_numeric,
                      p.max_rel_error);
        out << line << '\n';
      }
    }
  }
  char line[120];
  std::snprintf(line, sizeof line, "%zu checks, worst relative error %.3e, tolerance %.1e: %s", count,
                worst, options.tolerance, ok ? "PASS" : "FAIL");
  out << line << '\n';
  return ok;
}

// -- inspect -------------------------------------------------------------------

namespace {

std::vector<std::filesystem::path> run_checkpoints(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (std::size_t i = 0;; ++i) {
    auto p = dir / ("client_" + std::to_string(i) + ".ckpt");
    if (!std::filesystem::exists(p)) break;
    out.push_back(std::move(p));
  }
  if (out.empty()) throw ConfigError("no client_<i>.ckpt files in '" + dir.string() + "'");
  return out;
}

struct InspectImage {
  std::string stem;
  Tensor image;
  std::optional<int> label;
  std::optional<Box> truth;
};

}  // namespace

InspectSummary cmd_inspect(const InspectOptions& options, std::ostream& out) {
  if (options.out.empty()) throw ConfigError("inspect needs an output directory");
  RunConfig config;
  if (options.config) {
    config = *options.config;
  } else if (!options.run_dir.empty()) {
    config = load_config(options.run_dir / "config.ini");
  } else {
    throw ConfigError("inspect needs a run directory or a config");
  }
  const std::size_t top_k = options.top_k.value_or(config.interpret.top_k);
  const double percentile = options.percentile.value_or(config.interpret.percentile);

  std::vector<std::filesystem::path> ckpts = options.checkpoints;
  if (ckpts.empty()) {
    if (options.run_dir.empty()) throw ConfigError("no checkpoints given");
    ckpts = run_checkpoints(options.best ? options.run_dir / "best" : options.run_dir);
  }
  std::vector<ParamGroups> clients;
  for (const auto& p : ckpts) {
    clients.push_back(load_checkpoint(p));
    require_compatible(clients.back(), config.model);
  }

  std::vector<InspectImage> images;
  for (const auto& p : options.images) images.push_back({p.stem().string(), load_pnm(p), {}, {}});
  if (!options.manifest.empty()) {
    const auto base = options.manifest.parent_path();
    for (const auto& row : read_manifest(options.manifest)) {
      if (options.diseased_only && row.label == 0) continue;
      if (options.limit && images.size() >= options.limit + options.images.size()) break;
      images.push_back({std::filesystem::path(row.path).stem().string(), load_pnm(base / row.path),
                        row.label, row.box});
    }
  }
  if (images.empty()) throw ConfigError("inspect needs at least one image");
  const BackboneConfig& bb = config.model.backbone;
  const Shape expected{1, bb.input_channels, bb.input_height, bb.input_width};
  for (const auto& im : images) {
    if (im.image.shape() != expected) {
      throw DataError("image '" + im.stem + "' has shape " + shape_to_string(im.image.shape()) +
                      ", the model expects " + shape_to_string(expected));
    }
  }

  std::filesystem::create_directories(options.out);
  std::ofstream summary(options.out / "iou_summary.csv", std::ios::trunc);
  if (!summary) throw Error("cannot write into '" + options.out.string() + "'");
  summary << "image,label";
  for (std::size_t c = 0; c < clients.size(); ++c) summary << ",predicted_" << c;
  summary << ",truth_x,truth_y,truth_w,truth_h";
  for (std::size_t c = 0; c < clients.size(); ++c) summary << ",iou_" << c;
  summary << ",mean_iou,agreement\n";

  InspectSummary s;
  s.clients = clients.size();
  double hits = 0.0, iou_sum = 0.0, agree_sum = 0.0;
  for (const auto& im : images) {
    std::vector<Explanation> ex;
    for (std::size_t c = 0; c < clients.size(); ++c) {
      ex.push_back(explain(im.image, clients[c], config.model, 0, percentile));
      if (options.write_overlays) {
        Explanation top = ex.back();
        top.activations.resize(std::min(top_k == 0 ? top.activations.size() : top_k, top.activations.size()));
        write_explanation(top, im.image, options.out / ("client_" + std::to_string(c)), im.stem);
      }
    }
    summary << im.stem << ',' << (im.label ? std::to_string(*im.label) : "");
    for (const auto& e : ex) summary << ',' << e.predicted;
    if (im.truth) {
      summary << ',' << im.truth->x << ',' << im.truth->y << ',' << im.truth->w << ',' << im.truth->h;
    } else {
      summary << ",,,,";
    }
    double row_iou = 0.0;
    for (const auto& e : ex) {
      if (!im.truth || !im.label) {
        summary << ',';
        continue;
      }
      const PrototypeActivation* top = e.top_of_class(*im.label);
      const double v = top ? iou(top->box, *im.truth) : 0.0;
      row_iou += v;
      hits += v >= kLocalizationIoU ? 1.0 : 0.0;
      summary << ',' << fmt(v);
    }
    if (im.truth && im.label) {
      ++s.scored;
      iou_sum += row_iou;
      summary << ',' << fmt(row_iou / static_cast<double>(clients.size()));
    } else {
      summary << ',';
    }
    if (clients.size() >= 2) {
      const Agreement ag = cross_client_agreement(im.image, clients, config.model, percentile);
      agree_sum += ag.mean_off_diagonal();
      summary << ',' << fmt(ag.mean_off_diagonal());
      std::filesystem::create_directories(options.out / "agreement");
      std::ofstream m(options.out / "agreement" / (im.stem + ".csv"), std::ios::trunc);
      m << "client";
      for (std::size_t c = 0; c < clients.size(); ++c) m << ",client_" << c;
      m << '\n';
      for (std::size_t i = 0; i < clients.size(); ++i) {
        m << "client_" << i;
        for (std::size_t j = 0; j < clients.size(); ++j) m << ',' << fmt(ag.iou[i][j]);
        m << '\n';
      }
    } else {
      summary << ',';
    }
    summary << '\n';
    ++s.images;
  }
  const double pairs = static_cast<double>(s.scored * clients.size());
  if (s.scored) {
    s.hit_rate = hits / pairs;
    s.mean_iou = iou_sum / pairs;
  }
  if (clients.size() >= 2) s.mean_agreement = agree_sum / static_cast<double>(s.images);

  out << s.images << " images, " << s.clients << " clients\n";
  if (s.scored) {
    out << "localization over " << s.scored << " scored images x " << s.clients
        << " clients: hit rate (IoU >= " << fmt(kLocalizationIoU) << ") " << fmt(s.hit_rate)
        << ", mean IoU " << fmt(s.mean_iou) << '\n';
  }
  if (s.mean_agreement) out << "cross-client agreement (mean off-diagonal IoU) " << fmt(*s.mean_agreement) << '\n';
  return s;
}

// -- report --------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

ReportRow read_run(const std::filesystem::path& run) {
  const auto metrics = run / "metrics.csv";
  std::ifstream in(metrics);
  if (!in) throw Error("run '" + run.string() + "' has no metrics.csv");
  std::string header;
  std::getline(in, header);
  const auto cols = split_csv(header);
  auto col = [&](const std::string& name) {
    const auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw DataError("'" + metrics.string() + "' lacks column " + name);
    return static_cast<std::size_t>(it - cols.begin());
  };
  const std::size_t c_round = col("round"), c_client = col("client"), c_test = col("test_acc"),
                    c_bytes = col("payload_bytes");
  std::map<std::size_t, std::vector<std::vector<std::string>>> by_round;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != cols.size()) throw DataError("malformed row in '" + metrics.string() + "'");
    by_round[std::stoul(cells[c_round])].push_back(std::move(cells));
  }
  if (by_round.empty()) throw DataError("'" + metrics.string() + "' has no rows");

  ReportRow row;
  row.run = run;
  const auto& last = by_round.rbegin()->second;
  for (const auto& cells : last) {
    if (cells[c_client] == "mean") {
      row.result.payload_bytes = std::stoul(cells[c_bytes]);
      continue;
    }
    row.result.client_acc.push_back(std::stod(cells[c_test]));
  }
  double sum = 0.0;
  for (double a : row.result.client_acc) sum += a;
  row.result.mean_acc = row.result.client_acc.empty() ? 0.0 : sum / static_cast<double>(row.result.client_acc.size());

  row.result.variant = run.filename().string();
  if (std::filesystem::exists(run / "config.ini")) {
    const RunConfig cfg = load_config(run / "config.ini");
    if (!cfg.variant.empty()) row.result.variant = cfg.variant;
  }
  if (std::filesystem::exists(run / "global.ckpt")) {
    row.checkpoint_bytes = std::filesystem::file_size(run / "global.ckpt");
    row.result.checkpoint_bytes = row.checkpoint_bytes;
  }
  // Round-0-only runs send nothing; fall back to the size a payload would have.
  if (row.result.payload_bytes == 0 && std::filesystem::exists(run / "config.ini")) {
    const RunConfig cfg = load_config(run / "config.ini");
    FedConfig fed = cfg.fed;
    LossWeights w = cfg.loss;
    if (!cfg.variant.empty()) apply_variant(find_variant(cfg.variant), fed, w);
    const ParamGroups p = init_params(cfg.model, cfg.seed);
    RoundPayload payload;
    payload.samples = 1;
    if (fed.communicate_adapters) payload.alpha = p.alpha;
    if (fed.communicate_prototypes) {
      NamedTensors phi;
      for (const auto& name : fed.communicated_phi()) phi.add(name, p.phi.get(name));
      payload.phi = phi;
    }
    row.result.payload_bytes = serialize_payload(payload).size();
  }
  if (row.checkpoint_bytes) {
    row.payload_ratio = static_cast<double>(row.result.payload_bytes) / static_cast<double>(row.checkpoint_bytes);
  }
  return row;
}

}  // namespace

std::vector<ReportRow> cmd_report(const std::vector<std::filesystem::path>& runs,
                                  const std::optional<std::filesystem::path>& csv,
                                  std::ostream& out) {
  if (runs.empty()) throw ConfigError("report needs at least one run directory");
  std::vector<std::filesystem::path> dirs;
  for (const auto& run : runs) {
    if (!std::filesystem::exists(run / "metrics.csv") && std::filesystem::exists(run / "config.ini")) {
      const RunConfig cfg = load_config(run / "config.ini");
      bool expanded = false;
      for (const auto& v : cfg.grid) {
        if (std::filesystem::exists(run / v / "metrics.csv")) {
          dirs.push_back(run / v);
          expanded = true;
        }
      }
      if (expanded) continue;
    }
    dirs.push_back(run);
  }
  std::vector<ReportRow> rows;
  for (const auto& d : dirs) rows.push_back(read_run(d));
  const std::size_t n = rows.front().result.client_acc.size();
  for (const auto& r : rows) {
    if (r.result.client_acc.size() != n) {
      throw DataError("run '" + r.run.string() + "' has " + std::to_string(r.result.client_acc.size()) +
                      " clients, expected " + std::to_string(n));
    }
  }

  std::vector<VariantResult> table;
  for (const auto& r : rows) table.push_back(r.result);
  if (csv) write_comparison(*csv, table);
  for (const auto& r : rows) {
    out << r.result.variant << ": avg test accuracy " << fmt(r.result.mean_acc) << ", payload "
        << r.result.payload_bytes << " bytes";
    if (r.checkpoint_bytes) {
      char ratio[64];
      std::snprintf(ratio, sizeof ratio, "%.4f", r.payload_ratio);
      out << ", checkpoint " << r.checkpoint_bytes << " bytes, payload/checkpoint " << ratio;
    }
    out << '\n';
  }
  return rows;
}

}  // namespace protofed

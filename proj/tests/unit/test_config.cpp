#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "protofed/commands.hpp"

using namespace protofed;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("protofed_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

// Tiny task and model so commands finish in seconds.
ConfigOverrides tiny() {
  return {{"data.height", "32"},         {"data.width", "32"},
          {"data.glyph_size", "8"},      {"model.channels", "4,8"},
          {"model.freeze_mode", "frozen-random"}, {"model.prototypes_per_class", "2"},
          {"fed.num_clients", "2"},      {"fed.batch_size", "8"},
          {"site.1.samples", "20"},      {"site.2.samples", "24"},
          {"test.samples", "16"}};
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults") {
    const RunConfig c = default_config();
    CHECK(c.seed == 42);
    CHECK(c.fed.num_clients == 4);
    CHECK(c.fed.rounds == 50);
    CHECK(c.task.sites.size() == 4);
    CHECK(c.model.num_classes == c.task.image.num_classes);
    CHECK(c.model.backbone.input_height == c.task.image.height);
  }

  TEST_CASE("parse sections, comments and overrides") {
    const std::string text =
        "# run setup\n"
        "[run]\n"
        "seed = 7\n"
        "[fed]\n"
        "rounds = 3 ; short\n"
        "optimizer = sgd\n"
        "[loss]\n"
        "lambda_clst = 0.5\n";
    const RunConfig c = parse_config(text, {{"fed.rounds", "5"}});
    CHECK(c.seed == 7);
    CHECK(c.fed.seed == 7);
    CHECK(c.fed.rounds == 5);
    CHECK(c.fed.optimizer == OptimizerKind::Sgd);
    CHECK(c.loss.lambda_clst == 0.5);
    CHECK(c.task.sites[0].seed == default_task(7).sites[0].seed);
  }

  TEST_CASE("render round trip") {
    const RunConfig c = default_config({{"fed.rounds", "9"}, {"loss.beta", "0.1"}, {"fed.num_clients", "3"}});
    const RunConfig d = parse_config(render_config(c));
    CHECK(render_config(d) == render_config(c));
    CHECK(d.task.sites.size() == 3);
    CHECK(d.loss.beta == 0.1);
  }

  TEST_CASE("rejections name the line") {
    auto message = [](const std::string& text) {
      try {
        parse_config(text, {}, "cfg.ini");
      } catch (const ConfigError& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(message("[fed]\nroundz = 3\n").find("cfg.ini:2") != std::string::npos);
    CHECK(message("[nope]\nx = 1\n").find("cfg.ini:2") != std::string::npos);
    CHECK(message("[fed]\nrounds = 3\nrounds = 4\n").find("cfg.ini:3") != std::string::npos);
    CHECK(message("[fed]\nrounds = many\n").find("cfg.ini:2") != std::string::npos);
    CHECK_FALSE(message("rounds = 1\n").empty());
    CHECK_FALSE(message("[fed\n").empty());
    CHECK_FALSE(message("[fed]\ncommunicate_adapters = false\ncommunicate_prototypes = false\n").empty());
    CHECK_THROWS_AS(default_config({{"fed.bogus", "1"}}), ConfigError);
    CHECK_THROWS_AS(default_config({{"rounds", "1"}}), ConfigError);
  }

  TEST_CASE("client count resizes the sites") {
    const RunConfig c = default_config({{"fed.num_clients", "6"}});
    CHECK(c.task.sites.size() == 6);
    CHECK(c.task.test.id == 7);
    CHECK_THROWS_AS(default_config({{"fed.num_clients", "2"}, {"site.3.samples", "10"}}), ConfigError);
  }

  TEST_CASE("partition writes every site and refuses to overwrite") {
    const auto out = scratch("partition");
    const RunConfig c = default_config(tiny());
    const auto manifests = cmd_partition(c, out, false);
    REQUIRE(manifests.size() == 3);
    CHECK(read_manifest(out / "site1" / "manifest.csv").size() == 20);
    CHECK(read_manifest(out / "site2" / "manifest.csv").size() == 24);
    CHECK(read_manifest(out / "test" / "manifest.csv").size() == 16);
    CHECK(std::filesystem::exists(out / "config.ini"));
    const std::string first = slurp(out / "site2" / "manifest.csv");
    CHECK_THROWS_AS(cmd_partition(c, out, false), ConfigError);
    cmd_partition(c, out, true);
    CHECK(slurp(out / "site2" / "manifest.csv") == first);

    // Training from the written sites.
    RunConfig from_disk = load_config(out / "config.ini", {{"fed.rounds", "0"}, {"run.output_dir", (out / "run").string()}});
    CHECK(from_disk.data_dir == out);
    const TaskData data = load_task(from_disk);
    CHECK(data.clients[1].train.size() + data.clients[1].val.size() == 24);
    std::filesystem::remove_all(out);
  }

  TEST_CASE("train with zero rounds, report and inspect") {
    const auto out = scratch("train");
    ConfigOverrides o = tiny();
    o.emplace_back("fed.rounds", "0");
    o.emplace_back("run.output_dir", out.string());
    const RunConfig c = default_config(o);
    const auto rows = cmd_train(c, false);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].variant == "custom");
    const std::string metrics = slurp(out / "metrics.csv");
    CHECK(metrics.find("\n1,") == std::string::npos);
    CHECK(parse_config(slurp(out / "config.ini")).fed.rounds == 0);

    std::ostringstream text;
    const auto report = cmd_report({out}, out / "table.csv", text);
    REQUIRE(report.size() == 1);
    const auto& r = report[0].result;
    double mean = 0.0;
    for (double a : r.client_acc) mean += a / double(r.client_acc.size());
    CHECK(r.mean_acc == doctest::Approx(mean).epsilon(1e-12));
    CHECK(report[0].payload_ratio > 0.0);
    CHECK(text.str().find("payload/checkpoint") != std::string::npos);
    CHECK(slurp(out / "table.csv").rfind("variant,client_0,client_1,avg", 0) == 0);
    CHECK_THROWS_AS(cmd_report({out / "missing"}, std::nullopt, text), Error);

    // Inspect the test site with one prototype per client.
    const auto data_dir = scratch("train_data");
    cmd_partition(c, data_dir, false);
    InspectOptions io;
    io.run_dir = out;
    io.manifest = data_dir / "test" / "manifest.csv";
    io.top_k = 1;
    io.limit = 4;
    io.out = out / "inspect";
    std::ostringstream log;
    const auto summary = cmd_inspect(io, log);
    CHECK(summary.images == 4);
    CHECK(summary.clients == 2);
    CHECK(summary.mean_agreement.has_value());
    std::size_t ppm = 0;
    for (const auto& e : std::filesystem::directory_iterator(out / "inspect" / "client_0")) {
      ppm += e.path().extension() == ".ppm";
    }
    CHECK(ppm == 4);
    CHECK(std::filesystem::exists(out / "inspect" / "iou_summary.csv"));

    InspectOptions mismatch = io;
    mismatch.config = default_config();
    CHECK_THROWS_AS(cmd_inspect(mismatch, log), ConfigError);
    std::filesystem::remove_all(out);
    std::filesystem::remove_all(data_dir);
  }

  TEST_CASE("gradcheck command") {
    std::ostringstream out;
    CHECK(cmd_gradcheck({}, out));
    CHECK(out.str().find("PASS") != std::string::npos);
    std::ostringstream strict;
    GradcheckOptions o;
    o.tolerance = 1e-12;
    CHECK_FALSE(cmd_gradcheck(o, strict));
    CHECK(strict.str().find("FAIL") != std::string::npos);
  }
}

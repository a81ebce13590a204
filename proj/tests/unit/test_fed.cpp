#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "../common/fixtures.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "protofed/fed.hpp"

using namespace protofed;

namespace {

RoundPayload make_payload(std::uint32_t client, std::uint64_t samples, std::uint64_t seed) {
  RoundPayload p;
  p.client = client;
  p.round = 1;
  p.samples = samples;
  p.alpha = NamedTensors{{"adapter1.down", oracle::random_tensor({2, 3}, seed)},
                         {"adapter1.up", oracle::random_tensor({3, 2}, seed + 1)}};
  p.phi = NamedTensors{{"prototypes", oracle::random_tensor({4, 3}, seed + 2)},
                       {"head", oracle::random_tensor({4, 2}, seed + 3)}};
  return p;
}

GlobalState layout_of(const RoundPayload& p) {
  GlobalState g{*p.alpha, *p.phi, 0};
  for (auto& [n, t] : g.alpha) t.fill(0.0);
  for (auto& [n, t] : g.phi) t.fill(0.0);
  return g;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE("fed") {
  TEST_CASE("aggregation weights from site counts") {
    const std::vector<std::uint64_t> sizes{8962, 7601, 5099, 4080};
    const auto w = aggregation_weights(sizes);
    const double expect[] = {0.3482, 0.2953, 0.1981, 0.1585};
    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(w[i] - expect[i]) < 1e-4);
      CHECK(w[i] == double(sizes[i]) / 25742.0);
      total += w[i];
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
    const std::vector<std::uint64_t> with_zero{3, 0};
    CHECK_THROWS_AS(aggregation_weights(with_zero), ProtocolError);
  }

  TEST_CASE("aggregate matches the weighted-sum oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::vector<RoundPayload> ps;
      const std::uint64_t counts[] = {8962, 7601, 5099, 4080};
      for (std::uint32_t i = 0; i < 4; ++i) ps.push_back(make_payload(i, counts[i], seed * 50 + i * 7));
      const GlobalState g = aggregate(ps, layout_of(ps[0]), 4, false);
      CHECK(g.round == 1);
      for (auto member : {&RoundPayload::alpha, &RoundPayload::phi}) {
        for (const auto& name : (ps[0].*member)->names()) {
          const Tensor& got = (member == &RoundPayload::alpha ? g.alpha : g.phi).get(name);
          for (std::size_t j = 0; j < got.size(); ++j) {
            double want = 0.0, lo = 1e300, hi = -1e300;
            for (const auto& p : ps) {
              const double v = (p.*member)->get(name)[j];
              want += double(p.samples) / 25742.0 * v;
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
            CHECK(std::abs(got[j] - want) <= 1e-12);
            CHECK(got[j] >= lo);
            CHECK(got[j] <= hi);
          }
        }
      }
    }
  }

  TEST_CASE("aggregate of two equal clients is the midpoint") {
    RoundPayload a = make_payload(0, 10, 1), b = make_payload(1, 10, 2);
    const GlobalState g = aggregate({b, a}, layout_of(a), 2, false);
    const Tensor& got = g.phi.get("head");
    for (std::size_t j = 0; j < got.size(); ++j) {
      CHECK(got[j] == doctest::Approx((a.phi->get("head")[j] + b.phi->get("head")[j]) / 2).epsilon(1e-15));
    }
  }

  TEST_CASE("aggregate of identical inputs is the identity") {
    RoundPayload a = make_payload(0, 17, 3), b = a, c = a;
    b.client = 1;
    b.samples = 5;
    c.client = 2;
    c.samples = 99;
    const GlobalState g = aggregate({a, b, c}, layout_of(a), 3, false);
    CHECK(g.alpha.identical(*a.alpha));
    CHECK(g.phi.identical(*a.phi));
  }

  TEST_CASE("aggregate leaves uncommunicated tensors alone") {
    RoundPayload a = make_payload(0, 4, 5), b = make_payload(1, 4, 6);
    a.alpha.reset();
    b.alpha.reset();
    GlobalState prev = layout_of(make_payload(0, 1, 7));
    prev.alpha.get("adapter1.up").fill(0.25);
    const GlobalState g = aggregate({a, b}, prev, 2, false);
    CHECK(g.alpha.identical(prev.alpha));

    // Prototypes only: the head stays as it was.
    NamedTensors protos_a{{"prototypes", a.phi->get("prototypes")}};
    a.phi = protos_a;
    b.phi = NamedTensors{{"prototypes", b.phi->get("prototypes")}};
    const GlobalState h = aggregate({a, b}, prev, 2, false);
    CHECK(h.phi.get("head").identical(prev.phi.get("head")));
    CHECK_FALSE(h.phi.get("prototypes").identical(prev.phi.get("prototypes")));
  }

  TEST_CASE("aggregate protocol errors") {
    const RoundPayload a = make_payload(0, 4, 8), b = make_payload(1, 6, 9);
    const GlobalState prev = layout_of(a);
    CHECK_THROWS_AS(aggregate({a}, prev, 2, false), ProtocolError);
    CHECK_THROWS_AS(aggregate({}, prev, 2, true), ProtocolError);
    CHECK_THROWS_AS(aggregate({a, a}, prev, 2, false), ProtocolError);
    RoundPayload late = b;
    late.round = 2;
    CHECK_THROWS_AS(aggregate({a, late}, prev, 2, false), ProtocolError);
    RoundPayload no_alpha = b;
    no_alpha.alpha.reset();
    CHECK_THROWS_AS(aggregate({a, no_alpha}, prev, 2, false), ProtocolError);
    RoundPayload wrong = b;
    wrong.phi->get("head") = Tensor(Shape{2, 4});
    CHECK_THROWS_AS(aggregate({a, wrong}, prev, 2, false), ProtocolError);

    // Straggler with renormalization.
    const GlobalState g = aggregate({a}, prev, 2, true);
    CHECK(g.phi.identical(*a.phi));
  }

  TEST_CASE("payload round trip and corruption") {
    RoundPayload p = make_payload(3, 1234, 10);
    p.round = 7;
    const auto bytes = serialize_payload(p);
    const RoundPayload q = deserialize_payload(bytes);
    CHECK(q.identical(p));
    CHECK(q.bytes == bytes.size());

    RoundPayload only_phi = p;
    only_phi.alpha.reset();
    CHECK(deserialize_payload(serialize_payload(only_phi)).identical(only_phi));

    auto bad = bytes;
    bad[0] = 'Q';
    CHECK_THROWS_AS(deserialize_payload(bad), ProtocolError);
    auto version = bytes;
    version[4] = 9;
    try {
      deserialize_payload(version);
      FAIL("version accepted");
    } catch (const ProtocolError& e) {
      CHECK(e.offset() == 4);
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() - 5);
    try {
      deserialize_payload(truncated);
      FAIL("truncation accepted");
    } catch (const ProtocolError& e) {
      CHECK(e.offset() > 24);
    }
    auto trailing = bytes;
    trailing.push_back(1);
    CHECK_THROWS_AS(deserialize_payload(trailing), ProtocolError);
  }

  TEST_CASE("payload never carries the backbone") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 1);
    FedConfig fed = fixtures::toy_fed(1, 1);
    TaskData data = build_task(fixtures::toy_task(1, 1));
    ClientState c{0, data.clients[0], init, Optimizer(OptimizerKind::Sgd, 1e-2), 0};
    const GlobalState g{init.alpha, init.phi, 0};
    const LossWeights w;
    const auto r = local_update(c, g, {&model, &w, &fed});
    for (const auto* group : {&*r.payload.alpha, &*r.payload.phi}) {
      for (const auto& name : group->names()) CHECK_FALSE(init.omega.contains(name));
    }
    CHECK(r.payload.phi->names() == std::vector<std::string>{"prototypes", "head"});

    fed.communicate_head = false;
    ClientState c2{0, data.clients[0], init, Optimizer(OptimizerKind::Sgd, 1e-2), 0};
    const auto r2 = local_update(c2, g, {&model, &w, &fed});
    CHECK(r2.payload.phi->names() == std::vector<std::string>{"prototypes"});
    CHECK(r2.payload.bytes < r.payload.bytes);
  }

  TEST_CASE("variant presets") {
    CHECK(default_variant_grid().size() == 5);
    for (const auto& v : known_variants()) CHECK(&find_variant(v.name) == &v);
    CHECK_THROWS_AS(find_variant("fednova"), ConfigError);
    FedConfig fed;
    LossWeights w;
    apply_variant(find_variant("fedavg"), fed, w);
    CHECK_FALSE(fed.use_prox);
    CHECK(w.beta == 0.0);
    FedConfig empty;
    empty.communicate_adapters = false;
    empty.communicate_prototypes = false;
    CHECK_THROWS_AS(empty.validate(), ConfigError);
  }

  TEST_CASE("broadcast") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 2);
    TaskData data = build_task(fixtures::toy_task(2, 2));
    std::vector<ClientState> clients(2);
    for (std::uint32_t i = 0; i < 2; ++i) {
      clients[i].id = i;
      clients[i].data = data.clients[i];
      clients[i].params = init_params(model, 10 + i);
    }
    GlobalState g{init.alpha, init.phi, 0};
    for (auto& [n, t] : g.alpha) t.fill(0.0);
    FedConfig fed = fixtures::toy_fed(2, 1);
    broadcast(g, clients, fed);
    for (const auto& c : clients) {
      for (const auto& [n, t] : c.params.alpha) CHECK(sum_squares(t) == 0.0);
      CHECK(proximal(c.params.alpha, c.params.phi, g.alpha, g.phi, 1.0, 1.0) == 0.0);
    }

    fed.communicate_head = false;
    clients[0].params.phi.get("head").fill(9.0);
    broadcast(g, clients, fed);
    CHECK(clients[0].params.phi.get("head")[0] == 9.0);

    GlobalState bad = g;
    bad.alpha = NamedTensors{{"adapter1.down", Tensor(Shape{1})}};
    CHECK_THROWS_AS(broadcast(bad, clients, fed), ProtocolError);
  }

  TEST_CASE("zero learning rate leaves the broadcast values") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 3);
    TaskData data = build_task(fixtures::toy_task(1, 3));
    const FedConfig fed = fixtures::toy_fed(1, 1);
    const LossWeights w;
    for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
      ClientState c{0, data.clients[0], init, Optimizer(kind, 0.0), 0};
      const auto r = local_update(c, {init.alpha, init.phi, 0}, {&model, &w, &fed});
      CHECK(r.payload.alpha->identical(init.alpha));
      CHECK(r.payload.phi->identical(init.phi));
    }
  }

  TEST_CASE("one sgd step moves by exactly -lr * gradient") {
    const auto model = fixtures::toy_model();
    ParamGroups params = init_params(model, 4);
    for (auto& [n, t] : params.alpha) t = oracle::random_tensor(t.shape(), 60 + t.size(), -0.2, 0.2);
    const SiteDataset site = generate_site({1, 8, 0.5, 0.0, 1.0, 0.03, 5}, fixtures::toy_image());
    const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
    const Tensor x = site.gather(all);
    const auto labels = site.gather_labels(all);
    GlobalState g{params.alpha, params.phi, 0};
    for (auto& [n, t] : g.alpha) t += oracle::random_tensor(t.shape(), 70 + t.size(), -0.1, 0.1);
    const LossWeights w;

    ad::Tape tape;
    const ModelVars vars = bind_params(tape, params, Trainable::AdaptersAndPrototypes);
    const auto fwd = forward(tape, vars, tape.constant(x), model);
    const auto classes = model.prototype_classes();
    const auto lv = local_loss(tape, fwd, vars, params, labels, classes, {&g.alpha, &g.phi}, w);
    tape.backward(lv.total);
    const ParamGroups grads = collect_grads(tape, vars, params);

    const double lr = 0.05;
    ParamGroups stepped = params;
    Optimizer sgd(OptimizerKind::Sgd, lr);
    train_step(stepped, sgd, x, labels, model, w, {&g.alpha, &g.phi},
               Trainable::AdaptersAndPrototypes, true);
    CHECK(stepped.omega.identical(params.omega));
    for (auto group : {&ParamGroups::alpha, &ParamGroups::phi}) {
      auto g_it = (grads.*group).begin();
      auto p_it = (params.*group).begin();
      for (const auto& [name, t] : stepped.*group) {
        for (std::size_t j = 0; j < t.size(); ++j) {
          CHECK(t[j] == p_it->second[j] - lr * g_it->second[j]);
        }
        ++g_it;
        ++p_it;
      }
    }
  }

  TEST_CASE("zero rounds reports the initial evaluation") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 5);
    const TaskData data = build_task(fixtures::toy_task(2, 5));
    const auto report = run_federation(fixtures::toy_fed(2, 0), model, LossWeights{}, data, init);
    CHECK(report.rows.size() == 3);
    for (const auto& r : report.rows) CHECK(r.round == 0);
    CHECK(report.global.alpha.identical(init.alpha));
    CHECK(report.best_round == 0);
    CHECK(report.payload_bytes > 0);
  }

  TEST_CASE("seeded runs write identical metrics") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 6);
    const TaskData data = build_task(fixtures::toy_task(3, 6));
    FedConfig fed = fixtures::toy_fed(3, 2);
    const auto root = std::filesystem::temp_directory_path() / "protofed_test_fed_det";
    std::filesystem::remove_all(root);
    run_federation(fed, model, LossWeights{}, data, init, root / "a");
    fed.workers = 3;
    run_federation(fed, model, LossWeights{}, data, init, root / "b");
    const std::string a = slurp(root / "a" / "metrics.csv");
    CHECK(a.rfind(kMetricsHeader, 0) == 0);
    CHECK(a == slurp(root / "b" / "metrics.csv"));
    CHECK(slurp(root / "a" / "global.ckpt") == slurp(root / "b" / "global.ckpt"));
    CHECK(std::filesystem::exists(root / "a" / "best" / "round.txt"));
    std::filesystem::remove_all(root);
  }

  TEST_CASE("compare variants") {
    const auto model = fixtures::toy_model();
    const ParamGroups init = init_params(model, 7);
    const TaskData data = build_task(fixtures::toy_task(2, 7));
    FedConfig fed = fixtures::toy_fed(2, 1);
    const auto rows = compare_variants({"ours", "ours"}, fed, model, LossWeights{}, data, init);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].client_acc == rows[1].client_acc);
    CHECK(rows[0].payload_bytes == rows[1].payload_bytes);

    FedConfig single = fed;
    LossWeights w;
    apply_variant(find_variant("ours"), single, w);
    const auto report = run_federation(single, model, w, data, init);
    CHECK(rows[0].client_acc == report.final_test_acc);
    CHECK(rows[0].mean_acc == report.final_mean_test_acc);
  }
}

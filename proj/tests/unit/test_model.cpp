#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "protofed/binary_io.hpp"
#include "protofed/model.hpp"

using namespace protofed;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.backbone.input_height = 16;
  c.backbone.input_width = 16;
  c.backbone.channels = {4, 8};
  c.backbone.freeze_mode = FreezeMode::FrozenRandom;
  c.prototypes_per_class = 2;
  return c;
}

// Random adapters so the residual branch is exercised.
ParamGroups toy_params(const ModelConfig& c, std::uint64_t seed) {
  ParamGroups p = init_params(c, seed);
  std::uint64_t s = seed * 31 + 7;
  for (auto& [name, t] : p.alpha) t = oracle::random_tensor(t.shape(), ++s, -0.4, 0.4);
  for (auto& [name, t] : p.omega) t = oracle::random_tensor(t.shape(), ++s, -0.5, 0.5);
  return p;
}

Tensor oracle_adapter(const Tensor& h, const Tensor& down, const Tensor& up) {
  const Tensor mid = oracle::relu(oracle::conv2d(h, down, Tensor(), 1, 0));
  return h + oracle::conv2d(mid, up, Tensor(), 1, 0);
}

Tensor oracle_backbone(const Tensor& x, const ParamGroups& p, const ModelConfig& c, bool adapters) {
  Tensor h = x + Tensor(x.shape(), -c.backbone.input_offset);
  for (std::size_t b = 0; b < c.backbone.num_blocks(); ++b) {
    h = oracle::relu(oracle::conv2d(h, p.omega.get(names::conv_weight(b)),
                                    p.omega.get(names::conv_bias(b)), 1, 1));
    if (c.backbone.pools(b)) h = oracle::maxpool(h, 2, 2);
    if (adapters) {
      h = oracle_adapter(h, p.alpha.get(names::adapter_down(b)), p.alpha.get(names::adapter_up(b)));
    }
  }
  return h;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("config geometry") {
    const ModelConfig c = toy_config();
    CHECK(c.feature_shape() == Shape{8, 8, 8});
    CHECK(c.num_prototypes() == 4);
    CHECK(c.prototype_classes() == std::vector<int>{0, 0, 1, 1});
    CHECK(c.bottleneck(8) == 2);
    CHECK(c.bottleneck(4) == 1);
    ModelConfig d;
    CHECK(d.feature_shape() == Shape{64, 8, 8});
    ModelConfig bad = toy_config();
    bad.adapter_reduction = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("adapter forward") {
    const Tensor h = oracle::random_tensor({1, 8, 4, 4}, 1);
    SUBCASE("zero down is the identity") {
      AdapterModule a{Tensor(Shape{2, 8, 1, 1}), oracle::random_tensor({8, 2, 1, 1}, 2)};
      CHECK(adapter_forward(h, a).identical(h));
    }
    SUBCASE("zero up is the identity") {
      AdapterModule a{oracle::random_tensor({2, 8, 1, 1}, 3), Tensor(Shape{8, 2, 1, 1})};
      CHECK(adapter_forward(h, a).identical(h));
    }
    SUBCASE("matches composed oracle") {
      AdapterModule a{oracle::random_tensor({2, 8, 1, 1}, 4), oracle::random_tensor({8, 2, 1, 1}, 5)};
      CHECK(adapter_forward(h, a).identical(oracle_adapter(h, a.down, a.up)));
    }
    SUBCASE("depth mismatch") {
      AdapterModule a{Tensor(Shape{2, 6, 1, 1}), Tensor(Shape{6, 2, 1, 1})};
      CHECK_THROWS_AS(adapter_forward(h, a), ConfigError);
    }
  }

  TEST_CASE("backbone forward") {
    const ModelConfig c = toy_config();
    const ParamGroups p = toy_params(c, 0);
    const Tensor x = oracle::random_tensor({2, 1, 16, 16}, 6, 0.0, 1.0);

    CHECK(max_abs_diff(backbone_forward(x, p, c), oracle_backbone(x, p, c, true)) <= 1e-12);

    ParamGroups zeroed = p;
    for (auto& [name, t] : zeroed.alpha) t.fill(0.0);
    CHECK(backbone_forward(x, zeroed, c).identical(backbone_forward(x, p, c, false)));

    // Batch independence.
    const Tensor both = backbone_forward(x, p, c);
    const std::size_t per = shape_numel(c.feature_shape());
    for (std::size_t n = 0; n < 2; ++n) {
      Tensor xi(Shape{1, 1, 16, 16});
      for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = x[n * xi.size() + i];
      const Tensor zi = backbone_forward(xi, p, c);
      for (std::size_t i = 0; i < per; ++i) CHECK(zi[i] == both[n * per + i]);
    }

    CHECK_THROWS_AS(backbone_forward(Tensor(Shape{1, 1, 12, 16}), p, c), ConfigError);
  }

  TEST_CASE("prototype similarities") {
    const Tensor z = oracle::random_tensor({2, 5, 4, 4}, 7);
    SUBCASE("exact copy scores zero") {
      Tensor protos = oracle::random_tensor({2, 5, 1, 1}, 8);
      for (std::size_t c = 0; c < 5; ++c) protos.at(1, c, 0, 0) = z.at(0, c, 2, 3);
      const auto s = prototype_similarities(z, {protos, {0, 1}});
      CHECK(s.scores[1] == 0.0);
      for (double v : s.scores.values()) CHECK(v <= 0.0);
    }
    SUBCASE("identical prototypes give identical columns") {
      Tensor protos(Shape{3, 5, 1, 1}, 0.3);
      const auto s = prototype_similarities(z, {protos, {0, 0, 1}});
      for (std::size_t n = 0; n < 2; ++n) {
        CHECK(s.scores[n * 3] == s.scores[n * 3 + 1]);
        CHECK(s.scores[n * 3] == s.scores[n * 3 + 2]);
      }
    }
    SUBCASE("brute-force oracle") {
      const Tensor protos = oracle::random_tensor({4, 5, 1, 1}, 9);
      const auto s = prototype_similarities(z, {protos, {0, 0, 1, 1}});
      const auto mins = oracle::spatial_min(oracle::sliding(z, protos));
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t j = 0; j < 4; ++j) CHECK(s.scores[n * 4 + j] == doctest::Approx(-mins[n][j]).epsilon(1e-13));
    }
    SUBCASE("depth mismatch") {
      CHECK_THROWS_AS(prototype_similarities(z, {Tensor(Shape{1, 4, 1, 1}), {0}}), ConfigError);
    }
  }

  TEST_CASE("head logits") {
    const ModelConfig c = [] {
      ModelConfig m;
      m.prototypes_per_class = 5;
      return m;
    }();
    const ParamGroups p = init_params(c, 1);
    const auto head = p.head();
    CHECK(sum_squares(head_logits(Tensor(Shape{3, 10}), head)) == 0.0);

    Tensor onehot(Shape{1, 10});
    onehot[7] = 1.0;  // prototype of class 1
    const Tensor l = head_logits(onehot, head);
    CHECK(l[0] == -0.5);
    CHECK(l[1] == 1.0);

    // Row sums: 1 - 0.5 (C - 1).
    for (std::size_t j = 0; j < 10; ++j) CHECK(head.weights[j * 2] + head.weights[j * 2 + 1] == 0.5);

    const Tensor s = oracle::random_tensor({4, 10}, 10);
    const ClassificationHead rh{oracle::random_tensor({10, 2}, 11)};
    CHECK(head_logits(s, rh).identical(oracle::matmul(s, rh.weights)));
    CHECK_THROWS_AS(head_logits(Tensor(Shape{1, 9}), rh), ConfigError);
  }

  TEST_CASE("model forward composes the parts") {
    const ModelConfig c = toy_config();
    const ParamGroups p = toy_params(c, 0);
    Tensor x = oracle::random_tensor({3, 1, 16, 16}, 12, 0.0, 1.0);
    // Samples 0 and 2 are the same image.
    for (std::size_t i = 0; i < 256; ++i) x[512 + i] = x[i];

    const ModelOutput out = model_forward(x, p, c);
    const Tensor z = backbone_forward(x, p, c);
    const auto sim = prototype_similarities(z, p.prototype_layer(c));
    CHECK(out.distance_maps.identical(sim.distance_maps));
    CHECK(out.scores.identical(sim.scores));
    CHECK(out.logits.identical(head_logits(sim.scores, p.head())));
    CHECK(out.logits[0] == out.logits[4]);
    CHECK(out.logits[1] == out.logits[5]);

    ParamGroups zeroed = p;
    for (auto& [name, t] : zeroed.alpha) t.fill(0.0);
    CHECK(model_forward(x, zeroed, c).logits.identical(model_forward(x, p, c, false).logits));
  }

  TEST_CASE("init params") {
    const ModelConfig c = toy_config();
    const ParamGroups a = init_params(c, 5);
    CHECK(a.identical(init_params(c, 5)));
    CHECK_FALSE(a.identical(init_params(c, 6)));
    // Fresh adapters are the identity.
    const Tensor h = oracle::random_tensor({2, 4, 3, 3}, 13);
    CHECK(adapter_forward(h, a.adapter(0)).identical(h));
    for (double v : a.phi.get(names::kPrototypes).values()) {
      CHECK(v >= 0.0);
      CHECK(v < 1.0);
    }
    CHECK(a.omega.names() ==
          std::vector<std::string>{"block1.weight", "block1.bias", "block2.weight", "block2.bias"});
    CHECK(a.phi.names() == std::vector<std::string>{"prototypes", "head"});
  }

  TEST_CASE("predict breaks ties to the first class") {
    const Tensor logits(Shape{3, 2}, std::vector<double>{0.2, 0.1, 0.5, 0.5, -1.0, 2.0});
    CHECK(predict(logits) == std::vector<int>{0, 0, 1});
  }

  TEST_CASE("checkpoint round trip and corruption") {
    const ModelConfig c = toy_config();
    const ParamGroups p = toy_params(c, 3);
    const auto bytes = encode_checkpoint(p);
    CHECK(decode_checkpoint(bytes).identical(p));

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);

    const auto path = std::filesystem::temp_directory_path() / "protofed_test_model.ckpt";
    save_checkpoint(path, p);
    CHECK(load_checkpoint(path).identical(p));
    std::filesystem::remove(path);

    CHECK_NOTHROW(require_compatible(p, c));
    ModelConfig other = c;
    other.backbone.channels = {4, 6};
    CHECK_THROWS_AS(require_compatible(p, other), ConfigError);
  }

  TEST_CASE("tape forward gradients reach only trainable groups") {
    const ModelConfig c = toy_config();
    const ParamGroups p = toy_params(c, 4);
    ad::Tape tape;
    const ModelVars vars = bind_params(tape, p, Trainable::AdaptersAndPrototypes);
    const auto x = tape.constant(oracle::random_tensor({2, 1, 16, 16}, 14, 0.0, 1.0));
    const auto fwd = forward(tape, vars, x, c);
    tape.backward(ad::sum_squares(tape, fwd.logits));
    const ParamGroups g = collect_grads(tape, vars, p);
    CHECK(g.omega.same_layout(p.omega));
    CHECK(sum_squares(g.omega.get("block1.weight")) == 0.0);
    CHECK(sum_squares(g.alpha.get("adapter2.up")) > 0.0);
    CHECK(sum_squares(g.phi.get("head")) > 0.0);
  }
}

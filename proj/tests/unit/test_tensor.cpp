#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "protofed/autograd.hpp"
#include "protofed/gradcheck.hpp"
#include "protofed/ops.hpp"

using namespace protofed;

TEST_SUITE("tensor") {
  TEST_CASE("shapes are validated") {
    CHECK(shape_numel({2, 3, 4}) == 24);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ConfigError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1.0, 2.0}), ConfigError);
    Tensor t(Shape{2, 3}, 1.5);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(t.reshaped({4, 2}), ConfigError);
  }

  TEST_CASE("named tensors flatten round trip") {
    NamedTensors g{{"a", oracle::random_tensor({2, 2}, 1)}, {"b", oracle::random_tensor({3}, 2)}};
    const auto flat = g.flatten();
    CHECK(flat.size() == 7);
    NamedTensors h = g;
    for (auto& [name, t] : h) t.fill(0.0);
    h.unflatten(flat);
    CHECK(h.identical(g));
    CHECK(g.names() == std::vector<std::string>{"a", "b"});
    CHECK_THROWS(g.add("a", Tensor(Shape{1})));
  }

  TEST_CASE("conv2d") {
    SUBCASE("sum of ones") {
      Tensor x(Shape{1, 1, 3, 3}, 1.0), k(Shape{1, 1, 3, 3}, 1.0), b(Shape{1}, 0.0);
      const Tensor y = ops::conv2d(x, k, b, {1, 0});
      REQUIRE(y.shape() == Shape{1, 1, 1, 1});
      CHECK(y[0] == 9.0);
    }
    SUBCASE("identity kernel") {
      const Tensor x = oracle::random_tensor({2, 1, 5, 4}, 3);
      const Tensor y = ops::conv2d(x, Tensor(Shape{1, 1, 1, 1}, 1.0), Tensor(Shape{1}, 0.0), {1, 0});
      CHECK(y.identical(x));
    }
    SUBCASE("stride 2 padding 1 matches the loop oracle bitwise") {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor x = oracle::random_tensor({2, 3, 8, 8}, seed);
        const Tensor k = oracle::random_tensor({4, 3, 3, 3}, seed + 100);
        const Tensor b = oracle::random_tensor({4}, seed + 200);
        const Tensor y = ops::conv2d(x, k, b, {2, 1});
        CHECK(y.shape() == Shape{2, 4, 4, 4});
        CHECK(y.identical(oracle::conv2d(x, k, b, 2, 1)));
      }
    }
    SUBCASE("no bias, padding 1") {
      const Tensor x = oracle::random_tensor({1, 2, 6, 5}, 9);
      const Tensor k = oracle::random_tensor({3, 2, 3, 3}, 10);
      CHECK(ops::conv2d(x, k, Tensor(), {1, 1}).identical(oracle::conv2d(x, k, Tensor(), 1, 1)));
    }
    SUBCASE("mismatched channels") {
      CHECK_THROWS_AS(ops::conv2d(Tensor(Shape{1, 2, 4, 4}), Tensor(Shape{1, 3, 3, 3}), Tensor(), {1, 1}),
                      ConfigError);
    }
  }

  TEST_CASE("relu") {
    const Tensor y = ops::relu(Tensor(Shape{3}, std::vector<double>{-1.0, 0.0, 2.0}));
    CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.0});

    const Tensor neg(Shape{2, 3}, -0.5);
    CHECK(sum_squares(ops::relu(neg)) == 0.0);
    CHECK(sum_squares(ops::relu_backward(neg, Tensor(Shape{2, 3}, 1.0))) == 0.0);
    // Subgradient at exactly zero.
    CHECK(ops::relu_backward(Tensor(Shape{1}, 0.0), Tensor(Shape{1}, 1.0))[0] == 0.0);

    const Tensor r = oracle::random_tensor({4, 5}, 11);
    CHECK(ops::relu(r).identical(oracle::relu(r)));
  }

  TEST_CASE("maxpool2d") {
    const auto p = ops::maxpool2d(Tensor(Shape{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}), 2, 2);
    REQUIRE(p.output.size() == 1);
    CHECK(p.output[0] == 4.0);

    const auto c = ops::maxpool2d(Tensor(Shape{1, 2, 4, 4}, 0.7), 2, 2);
    for (double v : c.output.values()) CHECK(v == 0.7);
    // Ties resolve to the first element in row-major order.
    CHECK(c.argmax[0] == 0);
    CHECK(c.argmax[1] == 2);

    const Tensor x = oracle::random_tensor({1, 2, 6, 6}, 12);
    CHECK(ops::maxpool2d(x, 2, 2).output.identical(oracle::maxpool(x, 2, 2)));
  }

  TEST_CASE("linear") {
    const Tensor x = oracle::random_tensor({4, 6}, 13);
    Tensor eye(Shape{6, 6});
    for (std::size_t i = 0; i < 6; ++i) eye[i * 6 + i] = 1.0;
    CHECK(ops::linear(x, eye).identical(x));
    CHECK(sum_squares(ops::linear(x, Tensor(Shape{6, 2}))) == 0.0);
    const Tensor w = oracle::random_tensor({6, 2}, 14);
    CHECK(ops::linear(x, w).identical(oracle::matmul(x, w)));
    CHECK_THROWS_AS(ops::linear(x, Tensor(Shape{5, 2})), ConfigError);
  }

  TEST_CASE("sliding squared distance") {
    SUBCASE("exact window gives zero") {
      const Tensor z = oracle::random_tensor({1, 3, 4, 4}, 15);
      Tensor p(Shape{1, 3, 2, 2});
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) p.at(0, c, u, v) = z.at(0, c, u, v);
      const Tensor d = ops::sliding_sq_l2(z, p);
      CHECK(d.at(0, 0, 0, 0) == 0.0);
      for (double v : d.values()) CHECK(v >= 0.0);
    }
    SUBCASE("zero feature against ones") {
      const Tensor d = ops::sliding_sq_l2(Tensor(Shape{1, 4, 3, 3}), Tensor(Shape{1, 4, 1, 1}, 1.0));
      for (double v : d.values()) CHECK(v == 4.0);
    }
    SUBCASE("loop oracle") {
      const Tensor z = oracle::random_tensor({1, 5, 6, 6}, 16);
      const Tensor p = oracle::random_tensor({3, 5, 1, 1}, 17);
      const Tensor d = ops::sliding_sq_l2(z, p);
      CHECK(max_abs_diff(d, oracle::sliding(z, p)) <= 1e-12);
      const Tensor p2 = oracle::random_tensor({2, 5, 2, 3}, 18);
      CHECK(max_abs_diff(ops::sliding_sq_l2(z, p2), oracle::sliding(z, p2)) <= 1e-12);
    }
    SUBCASE("single template form agrees") {
      const Tensor z = oracle::random_tensor({2, 3, 5, 5}, 19);
      const Tensor p = oracle::random_tensor({1, 3, 2, 2}, 20);
      const Tensor all = ops::sliding_sq_l2(z, p);
      const Tensor one = ops::sliding_sq_l2_single(z, p.reshaped({3, 2, 2}));
      CHECK(one.values() == all.values());
    }
  }

  TEST_CASE("spatial min breaks ties to the first position") {
    Tensor maps(Shape{1, 2, 2, 2}, std::vector<double>{3, 1, 1, 2, 5, 5, 5, 5});
    const auto r = ops::spatial_min(maps);
    CHECK(r.values[0] == 1.0);
    CHECK(r.argmin[0] == 1);
    CHECK(r.argmin[1] == 4);
  }

  TEST_CASE("ops are deterministic") {
    const Tensor x = oracle::random_tensor({2, 3, 8, 8}, 21);
    const Tensor k = oracle::random_tensor({4, 3, 3, 3}, 22);
    CHECK(ops::conv2d(x, k, Tensor(), {1, 1}).identical(ops::conv2d(x, k, Tensor(), {1, 1})));
    const Tensor p = oracle::random_tensor({2, 3, 1, 1}, 23);
    CHECK(ops::sliding_sq_l2(x, p).identical(ops::sliding_sq_l2(x, p)));
  }
}

TEST_SUITE("autograd") {
  TEST_CASE("grad check on x squared") {
    const Objective f = [](const NamedTensors& p, NamedTensors* g) {
      const double x = p.get("x")[0];
      if (g) *g = NamedTensors{{"x", Tensor::scalar(2.0 * x)}};
      return x * x;
    };
    const NamedTensors point{{"x", Tensor::scalar(3.0)}};
    const auto report = grad_check(f, point, 1e-6, 1e-6);
    CHECK(report.passed);
    CHECK(std::abs(report.params[0].worst_numeric - 6.0) <= 1e-6);
    CHECK(report.params[0].worst_analytic == 6.0);
  }

  TEST_CASE("constant objective has zero gradient") {
    const Objective f = tape_objective([](ad::Tape& tape, const std::vector<ad::Var>& v) {
      return ad::scale(tape, ad::sum_squares(tape, v[0]), 0.0);
    });
    const NamedTensors point{{"w", oracle::random_tensor({3, 2}, 1)}};
    NamedTensors grads = point;
    f(point, &grads);
    for (double g : grads.get("w").values()) CHECK(std::abs(g) <= 1e-8);
    CHECK(grad_check(f, point, 1e-6, 1e-5).passed);
  }

  TEST_CASE("wrong analytic gradient is reported") {
    const Objective f = [](const NamedTensors& p, NamedTensors* g) {
      const double x = p.get("x")[0];
      if (g) *g = NamedTensors{{"x", Tensor::scalar(3.0 * x)}};
      return x * x;
    };
    const auto report = grad_check(f, NamedTensors{{"x", Tensor::scalar(1.0)}}, 1e-6, 1e-5);
    CHECK_FALSE(report.passed);
    CHECK(report.max_rel_error > 0.1);
  }

  TEST_CASE("relative error") {
    CHECK(relative_error(0.0, 0.0) == 0.0);
    CHECK(relative_error(1.0, 1.0) == 0.0);
    CHECK(relative_error(1.0, 3.0) == doctest::Approx(0.5));
  }

  TEST_CASE("tape accumulates in insertion order") {
    ad::Tape tape;
    const auto x = tape.leaf(Tensor(Shape{2}, std::vector<double>{1.0, -2.0}), true);
    const auto y = ad::add(tape, x, x);
    const auto loss = ad::sum_squares(tape, y);
    tape.backward(loss);
    // d/dx sum (2x)^2 = 8x
    CHECK(tape.grad(x).values() == std::vector<double>{8.0, -16.0});
    CHECK(tape.value(loss).item() == 20.0);
  }

  TEST_CASE("constants receive no gradient") {
    ad::Tape tape;
    const auto c = tape.constant(Tensor(Shape{2}, 1.0));
    const auto x = tape.leaf(Tensor(Shape{2}, 2.0), true);
    tape.backward(ad::sum_squares(tape, ad::add(tape, c, x)));
    CHECK(tape.grad(c).empty());
    CHECK(tape.grad(x).values() == std::vector<double>{6.0, 6.0});
  }

  TEST_CASE("conv2d backward matches finite differences") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const NamedTensors point{{"x", oracle::random_tensor({1, 2, 5, 5}, seed)},
                               {"k", oracle::random_tensor({3, 2, 3, 3}, seed + 10)},
                               {"b", oracle::random_tensor({3}, seed + 20)}};
      const Tensor ref = oracle::random_tensor({1, 3, 3, 3}, seed + 30);
      const auto f = tape_objective([&](ad::Tape& tape, const std::vector<ad::Var>& v) {
        return ad::sq_diff_sum(tape, ad::conv2d(tape, v[0], v[1], v[2], {2, 1}), ref);
      });
      const auto report = grad_check(f, point, 1e-6, 1e-5);
      CHECK_MESSAGE(report.passed, "seed " << seed << " error " << report.max_rel_error);
    }
  }

  TEST_CASE("cross entropy values") {
    ad::Tape tape;
    const std::vector<int> labels{1};
    const auto ce = ad::cross_entropy(tape, tape.constant(Tensor(Shape{1, 2}, 0.0)), labels);
    CHECK(tape.value(ce).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    const std::vector<int> zero{0};
    const auto sat = ad::cross_entropy(
        tape, tape.constant(Tensor(Shape{1, 2}, std::vector<double>{20.0, -20.0})), zero);
    CHECK(tape.value(sat).item() < 1e-8);
  }
}

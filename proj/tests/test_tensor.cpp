#include <doctest.h>

#include <cmath>
#include <random>

#include "stagformer/errors.hpp"
#include "stagformer/tensor.hpp"

using namespace stagformer;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return Tensor(shape, v, grad);
}

// sin as a custom differentiable op, built on the public autograd hooks.
Tensor sin_op(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(x.data()[i]);
  Tensor out(x.shape(), v);
  if (autograd::should_record({&x})) {
    autograd::record(out, [x, out] {
      std::vector<double> g(x.numel());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = out.grad()[i] * std::cos(x.data()[i]);
      autograd::accumulate(x, g);
    });
  }
  return out;
}

}  // namespace

TEST_CASE("matmul values and errors") {
  Tensor id({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  const Tensor c = matmul(id, b);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{3, 4, 5, 6});
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient matches finite differences") {
  Tensor a = random_tensor({3, 3}, 1), b = random_tensor({3, 3}, 2);
  const auto rep = finite_diff_check([&] { return sum(matmul(a, b)); }, {a, b}, 1e-5, 18, 3);
  CHECK(rep.max_relative_error < 1e-6);
}

TEST_CASE("softmax rows") {
  const Tensor u = softmax_rows(Tensor({1, 4}, {0, 0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  const Tensor t = softmax_rows(Tensor({1, 2}, {std::log(2.0), 0.0}));
  CHECK(std::abs(t.data()[0] - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(t.data()[1] - 1.0 / 3.0) < 1e-15);
  const Tensor r = softmax_rows(random_tensor({5, 7}, 4, false));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0;
    for (double v : r.row(i)) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layer norm") {
  Tensor ones({3}, {1, 1, 1}), zeros({3}, {0, 0, 0});
  const Tensor flat = layer_norm(Tensor({1, 3}, {1, 1, 1}), ones, zeros);
  for (double v : flat.data()) CHECK(v == 0.0);
  const Tensor unit = layer_norm(Tensor({1, 2}, {1, -1}), Tensor({2}, {1, 1}), Tensor({2}, {0, 0}), 1e-14);
  CHECK(std::abs(unit.data()[0] - 1.0) < 1e-12);
  CHECK(std::abs(unit.data()[1] + 1.0) < 1e-12);
  const Tensor shifted = layer_norm(Tensor({1, 2}, {3, 8}), Tensor({2}, {1, 1}), Tensor({2}, {5, 5}));
  CHECK(std::abs((shifted.data()[0] + shifted.data()[1]) / 2 - 5.0) < 1e-12);
}

TEST_CASE("gelu") {
  CHECK(gelu(Tensor({1}, std::vector<double>{0.0})).item() == 0.0);
  CHECK(std::abs(gelu(Tensor({1}, std::vector<double>{10.0})).item() - 10.0) < 1e-4);
  Tensor x({4}, {-2, -0.5, 0.5, 2}, true);
  const auto rep = finite_diff_check([&] { return sum(gelu(x)); }, {x}, 1e-5, 4, 1);
  CHECK(rep.max_relative_error < 1e-6);
}

TEST_CASE("cross entropy") {
  const std::vector<std::uint32_t> t1{2};
  CHECK(std::abs(cross_entropy_logits(Tensor({1, 4}), t1).item() - std::log(4.0)) < 1e-12);
  CHECK(cross_entropy_logits(Tensor({1, 3}, {0, 1000, 0}), std::vector<std::uint32_t>{1}).item() < 1e-12);
  const Tensor z = random_tensor({2, 5}, 9, false);
  const std::vector<std::uint32_t> targets{3, 0};
  double want = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    double denom = 0;
    for (double v : z.row(r)) denom += std::exp(v);
    want += -std::log(std::exp(z.at(r, targets[r])) / denom);
  }
  CHECK(std::abs(cross_entropy_logits(z, targets).item() - want / 2) < 1e-10);
  CHECK_THROWS_AS(cross_entropy_logits(z, std::vector<std::uint32_t>{5, 0}), IndexError);
}

TEST_CASE("backward") {
  Tape tape;
  TapeScope scope(tape);
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});
  CHECK_THROWS_AS(tape.backward(sum(x)), StateError);

  tape.reset();
  Tensor y({2}, {1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4});

  tape.reset();
  CHECK_THROWS_AS(backward(add(y, y)), DimensionError);
}

TEST_CASE("finite difference checker") {
  Tensor theta({1}, {3.0}, true);
  CHECK(finite_diff_check([&] { return mul(theta, theta); }, {theta}, 1e-5, 1, 0).max_relative_error < 1e-9);
  Tensor s({1}, {1.0}, true);
  const auto rep = finite_diff_check([&] { return sin_op(s); }, {s}, 1e-5, 1, 0);
  CHECK(rep.max_relative_error < 1e-8);
  CHECK(std::abs(rep.worst_analytic - std::cos(1.0)) < 1e-15);
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Tensor a = random_tensor({4, 5}, 7), b = random_tensor({5, 3}, 8);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(softmax_rows(matmul(a, b))));
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  CHECK(run() == run());
}

TEST_CASE("primitive gradients on random inputs") {
  Tensor x = random_tensor({3, 4}, 11), g = random_tensor({4}, 12), b = random_tensor({4}, 13);
  Tensor w = random_tensor({4, 4}, 14), coef = random_tensor({2}, 15);
  auto loss = [&] {
    Tensor y = layer_norm(x, g, b);
    y = add_bias(matmul(gelu(y), w), b);
    y = scale_by(softmax_rows(y), coef, 1);
    return sum(mul(sub(y, scale(x, 0.5)), y));
  };
  CHECK(finite_diff_check(loss, {x, g, b, w, coef}, 1e-5, 80, 16).max_relative_error < 1e-6);
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(add(Tensor({2, 2}), Tensor({2, 3})), DimensionError);
  CHECK_THROWS_AS(add_bias(Tensor({2, 2}), Tensor({3})), DimensionError);
  CHECK_THROWS_AS(Tensor({0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), DimensionError);
}

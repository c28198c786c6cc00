#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"

#include "diffcls/error.hpp"
#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

using namespace diffcls;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

// sum(f(x) * w) with fixed random weights so every output entry matters.
Tensor weighted(const Tensor& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, 99);
  return sum(y * random_tensor(y.shape(), rng, false));
}

constexpr double kTol = 1e-4;
constexpr int kSeeds = 10;

}  // namespace

TEST_CASE("matmul identity and projector") {
  const Tensor id = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor r = matmul(id, a);
  CHECK(r.shape() == Shape{2, 2});
  for (std::size_t i = 0; i < 4; ++i) CHECK(r[i] == a[i]);

  const Tensor p = matmul(Tensor::matrix({{1, 0}, {0, 0}}), Tensor::matrix({{5, 6}, {7, 8}}));
  CHECK(p.at(0, 0) == 5);
  CHECK(p.at(0, 1) == 6);
  CHECK(p.at(1, 0) == 0);
  CHECK(p.at(1, 1) == 0);
}

TEST_CASE("matmul matches a triple loop") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng = make_rng(seed);
    const Tensor a = random_tensor({3, 4}, rng, false);
    const Tensor b = random_tensor({4, 2}, rng, false);
    const auto ref = oracle::matmul({a.data().begin(), a.data().end()},
                                    {b.data().begin(), b.data().end()}, 3, 4, 2);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("matmul batched and broadcast forms agree with per-slice products") {
  Rng rng = make_rng(3);
  const Tensor a = random_tensor({2, 3, 4}, rng, false);
  const Tensor b = random_tensor({2, 4, 5}, rng, false);
  const Tensor w = random_tensor({4, 5}, rng, false);
  const Tensor batched = matmul(a, b);
  const Tensor shared = matmul(a, w);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::vector<double> as(a.data().begin() + s * 12, a.data().begin() + (s + 1) * 12);
    const std::vector<double> bs(b.data().begin() + s * 20, b.data().begin() + (s + 1) * 20);
    const auto r1 = oracle::matmul(as, bs, 3, 4, 5);
    const auto r2 = oracle::matmul(as, {w.data().begin(), w.data().end()}, 3, 4, 5);
    for (std::size_t i = 0; i < 15; ++i) {
      CHECK(batched[s * 15 + i] == doctest::Approx(r1[i]).epsilon(1e-12));
      CHECK(shared[s * 15 + i] == doctest::Approx(r2[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  CHECK_THROWS_AS(matmul(Tensor::zeros({3}), Tensor::zeros({3, 1})), DimensionError);
}

TEST_CASE("softmax examples") {
  const Tensor u = softmax(Tensor::vector({0, 0, 0}), 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  for (double c : {-50.0, 0.0, 3.7, 200.0}) {
    const Tensor s = softmax(Tensor::vector({c, c + std::log(2.0)}), 0);
    CHECK(s[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }

  const Tensor big = softmax(Tensor::vector({1000, 1001}), 0);
  const long double e = std::exp(1.0L);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(static_cast<double>(1.0L / (1.0L + e))).epsilon(1e-14));
  CHECK(big[1] == doctest::Approx(static_cast<double>(e / (1.0L + e))).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    Rng rng = make_rng(seed);
    const Tensor x = random_tensor({4, 6}, rng, false, -20.0, 20.0);
    const Tensor s = softmax(x, 1);
    const Tensor shifted = softmax(x + 123.0, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      std::size_t best = 0, best_shift = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        total += s.at(r, c);
        CHECK(s.at(r, c) > 0.0);
        if (s.at(r, c) > s.at(r, best)) best = c;
        if (shifted.at(r, c) > shifted.at(r, best_shift)) best_shift = c;
      }
      CHECK(std::abs(total - 1.0) <= 1e-12);
      CHECK(best == best_shift);
    }
  }
}

TEST_CASE("batch norm normalizes with unit scale and zero shift") {
  Rng rng = make_rng(11);
  const Tensor x = random_tensor({16, 5}, rng, false, -30.0, 70.0);
  BatchNormStats stats;
  const Tensor y = batch_norm(x, Tensor::ones({5}), Tensor::zeros({5}), stats, true);
  for (std::size_t f = 0; f < 5; ++f) {
    double m = 0.0, v = 0.0;
    for (std::size_t b = 0; b < 16; ++b) m += y.at(b, f) / 16.0;
    for (std::size_t b = 0; b < 16; ++b) v += (y.at(b, f) - m) * (y.at(b, f) - m) / 16.0;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("batch norm of a constant batch returns the shift") {
  const Tensor x(Shape{4, 3}, 2.5);
  const Tensor shift = Tensor::vector({0.1, -0.2, 0.3});
  BatchNormStats stats;
  const Tensor y = batch_norm(x, Tensor::vector({2.0, 3.0, 4.0}), shift, stats, true);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t f = 0; f < 3; ++f) CHECK(y.at(b, f) == doctest::Approx(shift[f]).epsilon(1e-15));
}

TEST_CASE("batch norm matches a two-pass oracle and updates running statistics") {
  Rng rng = make_rng(5);
  const Tensor x = random_tensor({4, 3}, rng, false);
  const Tensor scale = random_tensor({3}, rng, false);
  const Tensor shift = random_tensor({3}, rng, false);
  BatchNormStats stats;
  const Tensor y = batch_norm(x, scale, shift, stats, true);
  for (std::size_t f = 0; f < 3; ++f) {
    double m = 0.0;
    for (std::size_t b = 0; b < 4; ++b) m += x.at(b, f);
    m /= 4.0;
    double v = 0.0;
    for (std::size_t b = 0; b < 4; ++b) v += (x.at(b, f) - m) * (x.at(b, f) - m);
    const double biased = v / 4.0, unbiased = v / 3.0;
    for (std::size_t b = 0; b < 4; ++b) {
      const double expect = scale[f] * (x.at(b, f) - m) / std::sqrt(biased + kBatchNormEps) + shift[f];
      CHECK(std::abs(y.at(b, f) - expect) < 1e-10);
    }
    CHECK(stats.running_mean[f] == doctest::Approx(0.1 * m).epsilon(1e-12));
    CHECK(stats.running_var[f] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
  }

  const Tensor e = batch_norm(x, scale, shift, stats, false);
  for (std::size_t f = 0; f < 3; ++f) {
    const double expect = scale[f] * (x.at(0, f) - stats.running_mean[f]) /
                              std::sqrt(stats.running_var[f] + kBatchNormEps) + shift[f];
    CHECK(std::abs(e.at(0, f) - expect) < 1e-12);
  }
}

TEST_CASE("batch norm training mode needs two samples") {
  BatchNormStats stats;
  CHECK_THROWS_AS(batch_norm(Tensor::zeros({1, 3}), Tensor::ones({3}), Tensor::zeros({3}), stats, true),
                  ConfigError);
  CHECK_NOTHROW(batch_norm(Tensor::zeros({1, 3}), Tensor::ones({3}), Tensor::zeros({3}), stats, false));
}

TEST_CASE("backward of sum and half squared norm") {
  Tensor x(Shape{2, 3, 2}, std::vector<double>{1, -2, 3, 4, 5, -6, 7, 8, 9, 10, 11, 12}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  (sum(x * x) / 2.0).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(x[i]).epsilon(1e-15));
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::ones({3}, true);
  CHECK_THROWS_AS((x * 2.0).backward(), UsageError);
}

TEST_CASE("a tensor used twice receives the sum of both path gradients") {
  Rng rng = make_rng(17);
  Tensor x = random_tensor({3}, rng);
  Tensor y = sum(exp(x) * x + softplus(x));
  y.backward();
  std::vector<double> shared(x.grad().begin(), x.grad().end());

  // Unrolled construction with two independent copies of x.
  Tensor a = x.clone(), b = x.clone(), c = x.clone();
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  c.set_requires_grad(true);
  sum(exp(a) * b + softplus(c)).backward();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(shared[i] == doctest::Approx(a.grad()[i] + b.grad()[i] + c.grad()[i]).epsilon(1e-14));
  }
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  Tensor x = Tensor::vector({1, 2}, true);
  sum(x * 3.0).backward();
  sum(x * 3.0).backward();
  CHECK(x.grad()[0] == 6.0);
  CHECK(x.grad()[1] == 6.0);
}

TEST_CASE("tape is topologically ordered and visits each node once") {
  Tensor x = Tensor::vector({0.5, -1.0}, true);
  Tensor h = exp(x);
  Tensor y = sum(h * h + h);
  const ComputationTape tape = ComputationTape::record(y);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& input : nodes[i]->inputs) {
      const auto pos = std::find(nodes.begin(), nodes.end(), input) - nodes.begin();
      CHECK(static_cast<std::size_t>(pos) < i);
    }
    CHECK(std::count(nodes.begin(), nodes.end(), nodes[i]) == 1);
  }
  CHECK(nodes.back() == y.node());
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x = Tensor::vector({1, 2}, true);
  NoGradGuard guard;
  CHECK_FALSE(grad_enabled());
  const Tensor y = sum(x * x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("strict mode flags non-finite values") {
  StrictModeGuard strict(true);
  CHECK_THROWS_AS(log(Tensor::vector({-1.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor::vector({1.0}), Tensor::vector({0.0})), NumericError);
}

TEST_CASE("broadcasting follows trailing-axis rules") {
  const Tensor a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::vector({10, 20, 30});
  const Tensor c = a + b;
  CHECK(c.at(1, 2) == 36);
  const Tensor col(Shape{2, 1}, std::vector<double>{1, 2});
  CHECK((a * col).at(1, 0) == 8);
  CHECK_THROWS_AS(add(a, Tensor::vector({1, 2})), DimensionError);
}

TEST_CASE("shape helpers") {
  const Tensor a(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(a, 0, 1);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at(2, 1) == 6);
  const Tensor cat = concat({a, a}, 1);
  CHECK(cat.shape() == Shape{2, 6});
  CHECK(cat.at(1, 4) == 5);
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
  const std::size_t idx[] = {1, 1, 0};
  const Tensor rows = embedding_lookup(a, idx);
  CHECK(rows.at(0, 0) == 4);
  CHECK(rows.at(2, 2) == 3);
}

// Finite-difference checks for every differentiable primitive.

TEST_CASE("elementwise gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng = make_rng(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor pos = random_tensor({3, 4}, rng, true, 0.5, 2.0);
    const auto s = static_cast<std::uint64_t>(seed);
    CHECK(oracle::gradient_check([&] { return weighted(a + b, s); }, {a, b}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(a - b, s); }, {a, b}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(a * b, s); }, {a, b}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(a / pos, s); }, {a, pos}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(a * 2.5 + 1.0, s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(-a, s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(exp(a), s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(log(pos), s); }, {pos}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(sqrt(pos), s); }, {pos}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(square(a), s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(relu(a), s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(softplus(a), s); }, {a}) < kTol);
  }
}

TEST_CASE("reduction and shape gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng = make_rng(seed);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({2, 3, 2}, rng);
    Tensor table = random_tensor({5, 3}, rng);
    const auto s = static_cast<std::uint64_t>(seed);
    CHECK(oracle::gradient_check([&] { return sum(a) * 0.7; }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return mean(a) * 1.3; }, {a}) < kTol);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      CHECK(oracle::gradient_check([&] { return weighted(sum(a, axis), s); }, {a}) < kTol);
      CHECK(oracle::gradient_check([&] { return weighted(mean(a, axis, true), s); }, {a}) < kTol);
    }
    CHECK(oracle::gradient_check([&] { return weighted(reshape(a, {6, 4}), s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(transpose(a, 0, 2), s); }, {a}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(concat({a, b}, 2), s); }, {a, b}) < kTol);
    const std::size_t idx[] = {4, 0, 4, 2};
    CHECK(oracle::gradient_check([&] { return weighted(embedding_lookup(table, idx), s); }, {table}) <
          kTol);
  }
}

TEST_CASE("linear algebra and normalization gradients") {
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    Rng rng = make_rng(seed);
    const auto s = static_cast<std::uint64_t>(seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor a3 = random_tensor({2, 3, 4}, rng);
    Tensor b3 = random_tensor({2, 4, 5}, rng);
    CHECK(oracle::gradient_check([&] { return weighted(matmul(a, b), s); }, {a, b}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(matmul(a3, b3), s); }, {a3, b3}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(matmul(a3, b), s); }, {a3, b}) < kTol);

    Tensor x = random_tensor({4, 5}, rng, true, -2.0, 2.0);
    CHECK(oracle::gradient_check([&] { return weighted(softmax(x, 1), s); }, {x}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(softmax(x, 0), s); }, {x}) < kTol);
    CHECK(oracle::gradient_check([&] { return weighted(log_softmax(x, 1), s); }, {x}) < kTol);

    Tensor scale = random_tensor({5}, rng);
    Tensor shift = random_tensor({5}, rng);
    CHECK(oracle::gradient_check([&] { return weighted(layer_norm(x, scale, shift), s); },
                                 {x, scale, shift}) < kTol);
    CHECK(oracle::gradient_check(
              [&] {
                BatchNormStats stats;
                return weighted(batch_norm(x, scale, shift, stats, true), s);
              },
              {x, scale, shift}) < kTol);

    const std::size_t labels[] = {0, 4, 2, 2};
    CHECK(oracle::gradient_check([&] { return cross_entropy(x, labels); }, {x}) < kTol);

    Tensor img = random_tensor({2, 2, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 2, 2}, rng);
    Tensor bias = random_tensor({3}, rng);
    CHECK(oracle::gradient_check([&] { return weighted(conv2d(img, w, bias, 2), s); }, {img, w, bias}) <
          kTol);
  }
}

TEST_CASE("conv2d with kernel equal to stride extracts patch dot products") {
  std::vector<double> px(16);
  for (std::size_t i = 0; i < 16; ++i) px[i] = static_cast<double>(i);
  const Tensor img(Shape{1, 1, 4, 4}, px);
  const Tensor w(Shape{1, 1, 2, 2}, 1.0);
  const Tensor out = conv2d(img, w, Tensor::vector({0.5}), 2);
  CHECK(out.shape() == Shape{1, 1, 2, 2});
  CHECK(out[0] == 0 + 1 + 4 + 5 + 0.5);
  CHECK(out[3] == 10 + 11 + 14 + 15 + 0.5);
}

TEST_CASE("cross entropy of zero logits is log C") {
  const std::size_t labels[] = {0, 2};
  CHECK(cross_entropy(Tensor::zeros({2, 3}), labels).item() == doctest::Approx(std::log(3.0)).epsilon(1e-15));
}

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"

#include "diffcls/error.hpp"
#include "diffcls/trainer.hpp"

using namespace diffcls;

namespace {

void set_grad(Tensor& p, std::vector<double> g) {
  auto dst = p.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] = g[i];
}

}  // namespace

TEST_CASE("zero gradient leaves parameters in place") {
  Tensor w(Shape{3}, std::vector<double>{1.0, -2.0, 3.0}, true);
  Adam opt({w});
  set_grad(w, {0.0, 0.0, 0.0});
  opt.step();
  CHECK(w[0] == 1.0);
  CHECK(w[1] == -2.0);
  CHECK(w[2] == 3.0);
}

TEST_CASE("constant gradients give steps of size lr") {
  Tensor w(Shape{2}, std::vector<double>{0.0, 0.0}, true);
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.eps = 0.0;
  Adam opt({w}, cfg);
  for (int i = 1; i <= 5; ++i) {
    opt.zero_grad();
    set_grad(w, {3.0, -0.5});
    opt.step();
    CHECK(w[0] == doctest::Approx(-0.01 * i).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.01 * i).epsilon(1e-12));
  }
}

TEST_CASE("three hand-unrolled Adam steps") {
  const std::vector<double> g{1.0, -1.0, 2.0};
  Tensor w(Shape{1}, 0.5, true);
  Adam opt({w});
  double m = 0.0, v = 0.0, x = 0.5;
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    set_grad(w, {g[static_cast<std::size_t>(t - 1)]});
    opt.step();
    const double gt = g[static_cast<std::size_t>(t - 1)];
    m = 0.9 * m + 0.1 * gt;
    v = 0.999 * v + 0.001 * gt * gt;
    const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
    x -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(std::abs(w[0] - x) <= 1e-12);
  }
  CHECK(opt.step_count() == 3);
}

TEST_CASE("Adam needs gradients") {
  Tensor w(Shape{2}, 1.0, true);
  Adam opt({w});
  CHECK_THROWS_AS(opt.step(), UsageError);
}

TEST_CASE("gradient clipping") {
  Tensor a(Shape{1}, 0.0, true), b(Shape{1}, 0.0, true);
  set_grad(a, {3.0});
  set_grad(b, {4.0});
  std::vector<Tensor> ps{a, b};
  CHECK(clip_gradients(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-15));
  set_grad(a, {0.1});
  set_grad(b, {0.2});
  clip_gradients(ps, 1.0);
  CHECK(a.grad()[0] == 0.1);
  Rng rng = make_rng(0);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor c(Shape{7}, 0.0, true);
    std::vector<double> g(7);
    for (double& x : g) x = 10.0 * standard_normal(rng);
    set_grad(c, g);
    std::vector<Tensor> one{c};
    clip_gradients(one, 0.5);
    double n = 0.0;
    for (double x : c.grad()) n += x * x;
    CHECK(std::sqrt(n) <= 0.5 + 1e-12);
  }
  CHECK_THROWS_AS(clip_gradients(ps, 0.0), UsageError);
}

TEST_CASE("fit config validation") {
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.plateau_factor = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(parse_lr_schedule("cosine"), ConfigError);
  CHECK(parse_lr_schedule("none") == LrSchedule::None);
}

TEST_CASE("one optimizer step per batch") {
  Tensor w(Shape{1}, 0.0, true);
  std::size_t calls = 0, seen = 0;
  BatchFn fn = [&](std::span<const std::size_t> batch, Rng&) {
    ++calls;
    seen += batch.size();
    return BatchResult{sum(w * w), 0, batch.size()};
  };
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  const TrainLog log = fit({w}, 10, fn, {}, cfg);
  CHECK(log.optimizer_steps == 9);
  CHECK(calls == 9);
  CHECK(seen == 30);
  // 9 samples with batch 4: the trailing single sample is merged.
  calls = 0;
  fit({w}, 9, fn, {}, cfg);
  CHECK(calls == 6);
  CHECK_THROWS_AS(fit({w}, 0, fn, {}, cfg), UsageError);
}

TEST_CASE("fit minimises a quadratic") {
  Tensor w(Shape{2}, std::vector<double>{2.0, -1.0}, true);
  const Tensor target(Shape{2}, std::vector<double>{0.3, 0.7});
  BatchFn fn = [&](std::span<const std::size_t>, Rng&) {
    const Tensor d = w - target;
    return BatchResult{sum(d * d), 0, 1};
  };
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.batch_size = 1;
  cfg.lr_schedule = LrSchedule::None;
  cfg.adam.lr = 0.05;
  const TrainLog log = fit({w}, 1, fn, {}, cfg);
  CHECK(log.optimizer_steps == 500);
  const Tensor d = w - target;
  CHECK(sum(d * d).item() < 1e-6);
}

TEST_CASE("fit is deterministic for a seed") {
  auto run = [](std::uint64_t seed) {
    Tensor w(Shape{1}, 1.0, true);
    BatchFn fn = [&](std::span<const std::size_t> batch, Rng& rng) {
      double s = 0.0;
      for (std::size_t i : batch) s += static_cast<double>(i);
      return BatchResult{sum(w * w * (s + uniform01(rng))), 0, batch.size()};
    };
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 3;
    cfg.seed = seed;
    return fit({w}, 11, fn, {}, cfg).to_csv();
  };
  CHECK(run(3) == run(3));
  CHECK(run(3) != run(4));
}

TEST_CASE("plateau halves the rate after patience is exceeded") {
  Tensor w(Shape{1}, 1.0, true);
  BatchFn fn = [&](std::span<const std::size_t>, Rng&) { return BatchResult{sum(w * w), 0, 1}; };
  EvalFn flat = [](int) { return EvalResult{1.0, 0.0, 0.0, 0.0}; };
  TrainConfig cfg;
  cfg.epochs = 14;
  cfg.batch_size = 1;
  cfg.adam.lr = 0.1;
  const TrainLog log = fit({w}, 1, fn, flat, cfg);
  for (int e = 0; e < 7; ++e) CHECK(log.epochs[static_cast<std::size_t>(e)].lr == 0.1);
  for (int e = 7; e < 13; ++e) CHECK(log.epochs[static_cast<std::size_t>(e)].lr == doctest::Approx(0.05));
  CHECK(log.epochs[13].lr == doctest::Approx(0.025));

  EvalFn improving = [](int epoch) { return EvalResult{1.0 / epoch, 0.0, 0.0, 0.0}; };
  const TrainLog steady = fit({w}, 1, fn, improving, cfg);
  for (const auto& r : steady.epochs) CHECK(r.lr == 0.1);
}

TEST_CASE("strict mode stops on a non-finite loss") {
  Tensor w(Shape{1}, 1.0, true);
  BatchFn fn = [&](std::span<const std::size_t>, Rng&) {
    return BatchResult{sum(w * std::numeric_limits<double>::quiet_NaN()), 0, 1};
  };
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.strict = true;
  CHECK_THROWS_AS(fit({w}, 2, fn, {}, cfg), NumericError);
}

TEST_CASE("log file and frozen parameters") {
  const auto path = std::filesystem::temp_directory_path() / "diffcls_test_trainer.csv";
  Tensor w(Shape{1}, 1.0, true);
  Tensor frozen(Shape{2}, std::vector<double>{4.0, 5.0});
  BatchFn fn = [&](std::span<const std::size_t>, Rng&) {
    Tensor y = frozen.detach();
    return BatchResult{sum(w * w) + sum(y), 1, 2};
  };
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.log_path = path;
  const TrainLog log = fit({w}, 3, fn, {}, cfg);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == TrainLog::csv_header());
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2);
  CHECK(frozen[0] == 4.0);
  CHECK(frozen[1] == 5.0);
  CHECK(log.epochs[0].train_accuracy == 0.5);
}

#include <algorithm>
#include <cmath>

#include "doctest.h"

#include "diffcls/error.hpp"
#include "diffcls/metrics.hpp"
#include "diffcls/random.hpp"
#include "json.hpp"

using namespace diffcls;

TEST_CASE("perfect classifier") {
  const std::vector<std::size_t> y{0, 1, 1, 0};
  const std::vector<double> p{1, 0, 0, 1, 0, 1, 1, 0};
  const MetricsReport r = compute_metrics(y, p, y, 2);
  CHECK(r.accuracy == 1.0);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.f1 == 1.0);
  CHECK(r.cross_entropy == 0.0);
  CHECK(r.mse == 0.0);
  CHECK(r.macro_f1 == 1.0);
  CHECK_FALSE(r.zero_division);
}

TEST_CASE("uniform probabilities") {
  const std::vector<std::size_t> y{0, 1, 1, 0, 1};
  const std::vector<double> p(10, 0.5);
  const MetricsReport r = compute_metrics(y, p, y, 2);
  CHECK(std::abs(r.cross_entropy - std::log(2.0)) <= 1e-12);
  CHECK(std::abs(r.mse - 0.25) <= 1e-12);
}

TEST_CASE("confusion counts") {
  // TP 2, FP 1, FN 1, TN 1 for class 1.
  const std::vector<std::size_t> labels{1, 1, 0, 1, 0};
  const std::vector<std::size_t> preds{1, 1, 1, 0, 0};
  std::vector<double> p;
  for (std::size_t k : preds) {
    p.push_back(k == 0 ? 0.8 : 0.2);
    p.push_back(k == 0 ? 0.2 : 0.8);
  }
  const MetricsReport r = compute_metrics(preds, p, labels, 2);
  CHECK(r.accuracy == doctest::Approx(0.6));
  CHECK(r.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(r.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  // Class 0: TP 1, FP 1, FN 1.
  CHECK(r.macro_precision == doctest::Approx((2.0 / 3.0 + 0.5) / 2.0));
  const double ce = -(3.0 * std::log(0.8) + 2.0 * std::log(0.2)) / 5.0;
  CHECK(r.cross_entropy == doctest::Approx(ce).epsilon(1e-14));
  const MetricsReport r0 = compute_metrics(preds, p, labels, 2, 0);
  CHECK(r0.precision == doctest::Approx(0.5));
}

TEST_CASE("formatting") {
  CHECK(format_percent(0.97321) == "97.32");
  CHECK(format_loss(0.35249) == "0.3525");
  MetricsReport r;
  r.accuracy = 0.9732;
  r.precision = 0.994;
  r.recall = 0.973;
  r.f1 = 0.981;
  r.cross_entropy = 0.3525;
  r.mse = 0.0644;
  CHECK(format_report(r) == "97.32,99.40,97.30,98.10,0.3525,0.0644");
  const auto j = nlohmann::json::parse(to_json(r));
  CHECK(j["formatted"] == format_report(r));
  CHECK(j["accuracy"].get<double>() == 0.9732);
  CHECK(metrics_csv_header().rfind("accuracy,precision,recall,f1,cross_entropy,mse", 0) == 0);
}

TEST_CASE("zero report and zero division") {
  const MetricsReport blank;
  CHECK(format_report(blank) == "0.00,0.00,0.00,0.00,0.0000,0.0000");
  const std::vector<std::size_t> y{0, 0, 0};
  const std::vector<double> p{0.9, 0.1, 0.7, 0.3, 0.6, 0.4};
  const MetricsReport r = compute_metrics(y, p, y, 2);
  CHECK(r.precision == 0.0);
  CHECK(r.recall == 0.0);
  CHECK(r.f1 == 0.0);
  CHECK(r.zero_division);
}

TEST_CASE("metrics ignore sample order") {
  Rng rng = make_rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 40, c = 3;
    std::vector<std::size_t> y(n), pr(n);
    std::vector<double> p(n * c);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<std::size_t>(uniform_int(rng, 0, 2));
      pr[i] = static_cast<std::size_t>(uniform_int(rng, 0, 2));
      double total = 0.0;
      for (std::size_t k = 0; k < c; ++k) total += p[i * c + k] = uniform01(rng) + 0.01;
      for (std::size_t k = 0; k < c; ++k) p[i * c + k] /= total;
    }
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::size_t> y2(n), pr2(n);
    std::vector<double> p2(n * c);
    for (std::size_t i = 0; i < n; ++i) {
      y2[i] = y[perm[i]];
      pr2[i] = pr[perm[i]];
      for (std::size_t k = 0; k < c; ++k) p2[i * c + k] = p[perm[i] * c + k];
    }
    const MetricsReport a = compute_metrics(pr, p, y, c), b = compute_metrics(pr2, p2, y2, c);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.f1 == doctest::Approx(b.f1).epsilon(1e-15));
    CHECK(a.cross_entropy == doctest::Approx(b.cross_entropy).epsilon(1e-13));
    CHECK(a.mse == doctest::Approx(b.mse).epsilon(1e-13));
    CHECK(a.macro_f1 == doctest::Approx(b.macro_f1).epsilon(1e-15));
  }
}

TEST_CASE("probability floor keeps cross-entropy finite") {
  const std::vector<std::size_t> y{1}, pr{0};
  const std::vector<double> p{1.0, 0.0};
  const MetricsReport r = compute_metrics(pr, p, y, 2);
  CHECK(r.cross_entropy == doctest::Approx(-std::log(kProbabilityFloor)));
}

TEST_CASE("metrics input errors") {
  const std::vector<std::size_t> none;
  const std::vector<double> nop;
  CHECK_THROWS_AS(compute_metrics(none, nop, none, 2), UsageError);
  const std::vector<std::size_t> y{0, 1};
  const std::vector<double> p{0.5, 0.5};
  CHECK_THROWS_AS(compute_metrics(y, p, y, 2), UsageError);
  const std::vector<double> p4{0.5, 0.5, 0.5, 0.5};
  CHECK_THROWS_AS(compute_metrics(y, p4, y, 2, 2), UsageError);
}

#include <cmath>

#include "doctest.h"

#include "diffcls/embedding.hpp"
#include "diffcls/error.hpp"
#include "diffcls/trainer.hpp"

using namespace diffcls;

TEST_CASE("sinusoidal embedding at t = 0") {
  const auto e = sinusoidal_embedding(0.0, 8);
  for (std::size_t i = 0; i < 8; i += 2) {
    CHECK(e[i] == 0.0);
    CHECK(e[i + 1] == 1.0);
  }
}

TEST_CASE("sinusoidal embedding, dim 4, t = 1") {
  const auto e = sinusoidal_embedding(1.0, 4);
  const double f = 1.0 / std::pow(10000.0, 0.5);
  CHECK(e[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(e[2] == doctest::Approx(std::sin(f)).epsilon(1e-15));
  CHECK(e[3] == doctest::Approx(std::cos(f)).epsilon(1e-15));
}

TEST_CASE("sinusoidal embeddings are distinct and bounded") {
  Rng rng = make_rng(0);
  for (int steps : {10, 20, 30}) {
    for (std::size_t dim : {std::size_t{4}, std::size_t{16}, std::size_t{128}}) {
      const TimeEmbedding emb(EmbeddingKind::Sinusoidal, dim, steps, rng);
      double min_dist = 1e300;
      for (int a = 1; a <= steps; ++a) {
        const Tensor ea = emb.embed(a);
        for (double v : ea.data()) CHECK((v >= -1.0 && v <= 1.0));
        for (int b = a + 1; b <= steps; ++b) {
          const Tensor eb = emb.embed(b);
          double d = 0.0;
          for (std::size_t i = 0; i < dim; ++i) d += (ea[i] - eb[i]) * (ea[i] - eb[i]);
          min_dist = std::min(min_dist, std::sqrt(d));
        }
      }
      CHECK(min_dist > 0.0);
    }
  }
}

TEST_CASE("embedding configuration checks") {
  Rng rng = make_rng(0);
  CHECK_THROWS_AS(TimeEmbedding(EmbeddingKind::Sinusoidal, 5, 10, rng), ConfigError);
  const TimeEmbedding emb(EmbeddingKind::Learnable, 6, 10, rng);
  CHECK(emb.table().shape() == Shape{10, 6});
  CHECK_THROWS_AS(emb.embed(0), UsageError);
  CHECK_THROWS_AS(emb.embed(11), UsageError);
  CHECK(parse_embedding_kind("sin") == EmbeddingKind::Sinusoidal);
  CHECK(parse_embedding_kind("linear") == EmbeddingKind::Learnable);
  CHECK_THROWS_AS(parse_embedding_kind("fourier"), ConfigError);
}

TEST_CASE("learnable lookup returns the row and only that row learns") {
  Rng rng = make_rng(4);
  TimeEmbedding emb(EmbeddingKind::Learnable, 8, 10, rng);
  const std::vector<double> before(emb.table().data().begin(), emb.table().data().end());
  const Tensor row = emb.embed(3);
  for (std::size_t i = 0; i < 8; ++i) CHECK(row[i] == before[2 * 8 + i]);

  Adam adam(emb.parameters());
  adam.zero_grad();
  sum(square(emb.embed(3))).backward();
  adam.step();
  const auto after = emb.table().data();
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t i = 0; i < 8; ++i) {
      if (r == 2) {
        CHECK(after[r * 8 + i] != before[r * 8 + i]);
      } else {
        CHECK(after[r * 8 + i] == before[r * 8 + i]);
      }
    }
  }
}

TEST_CASE("gradient reaches only looked-up rows") {
  Rng rng = make_rng(9);
  TimeEmbedding emb(EmbeddingKind::Learnable, 4, 10, rng);
  const int ts[] = {2, 7, 2};
  sum(emb.embed(ts)).backward();
  const auto g = emb.table().grad();
  for (std::size_t r = 0; r < 10; ++r) {
    const double expect = r == 1 ? 2.0 : (r == 6 ? 1.0 : 0.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[r * 4 + i] == expect);
  }
}

TEST_CASE("learnable table initialization scale") {
  Rng rng = make_rng(1);
  const TimeEmbedding emb(EmbeddingKind::Learnable, 128, 30, rng);
  double m = 0.0, v = 0.0;
  const auto d = emb.table().data();
  for (double x : d) m += x / static_cast<double>(d.size());
  for (double x : d) v += (x - m) * (x - m) / static_cast<double>(d.size());
  CHECK(std::abs(m) < 0.003);
  CHECK(std::sqrt(v) == doctest::Approx(kLearnableInitStd).epsilon(0.05));
}

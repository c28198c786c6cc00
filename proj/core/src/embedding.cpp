#include "diffcls/embedding.hpp"

#include <cmath>

#include "diffcls/error.hpp"

namespace diffcls {

std::string to_string(EmbeddingKind kind) {
  return kind == EmbeddingKind::Sinusoidal ? "sinusoidal" : "learnable";
}

EmbeddingKind parse_embedding_kind(const std::string& name) {
  if (name == "sinusoidal" || name == "sin") return EmbeddingKind::Sinusoidal;
  if (name == "learnable" || name == "linear") return EmbeddingKind::Learnable;
  throw ConfigError("unknown embedding '" + name + "' (expected learnable|sinusoidal)");
}

std::vector<double> sinusoidal_embedding(double t, std::size_t dim) {
  std::vector<double> out(dim);
  for (std::size_t i = 0; 2 * i < dim; ++i) {
    const double freq =
        std::pow(kSinusoidalBase, -static_cast<double>(2 * i) / static_cast<double>(dim));
    out[2 * i] = std::sin(t * freq);
    if (2 * i + 1 < dim) out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

TimeEmbedding::TimeEmbedding(EmbeddingKind kind, std::size_t dim, int steps, Rng& rng)
    : kind_(kind), dim_(dim), steps_(steps) {
  if (dim == 0) throw ConfigError("time embedding: dim must be positive");
  if (steps < 1) throw ConfigError("time embedding: T must be positive");
  if (kind == EmbeddingKind::Sinusoidal && dim % 2 != 0) {
    throw ConfigError("time embedding: sinusoidal dim must be even");
  }
  if (kind == EmbeddingKind::Learnable) {
    std::vector<double> values(static_cast<std::size_t>(steps) * dim);
    std::normal_distribution<double> init(0.0, kLearnableInitStd);
    for (double& v : values) v = init(rng);
    table_ = Tensor(Shape{static_cast<std::size_t>(steps), dim}, std::move(values), true);
  }
}

void TimeEmbedding::check_t(int t) const {
  if (t < 1 || t > steps_) {
    throw UsageError("time embedding: timestep " + std::to_string(t) + " outside 1.." +
                     std::to_string(steps_));
  }
}

Tensor TimeEmbedding::embed(int t) const {
  const int ts[1] = {t};
  return reshape(embed(std::span<const int>(ts)), Shape{dim_});
}

Tensor TimeEmbedding::embed(std::span<const int> t) const {
  for (int v : t) check_t(v);
  if (kind_ == EmbeddingKind::Learnable) {
    std::vector<std::size_t> rows(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) rows[i] = static_cast<std::size_t>(t[i] - 1);
    return embedding_lookup(table_, rows);
  }
  std::vector<double> values;
  values.reserve(t.size() * dim_);
  for (int v : t) {
    const auto row = sinusoidal_embedding(static_cast<double>(v), dim_);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{t.size(), dim_}, std::move(values));
}

std::vector<Tensor> TimeEmbedding::parameters() const {
  if (kind_ == EmbeddingKind::Learnable) return {table_};
  return {};
}

}  // namespace diffcls

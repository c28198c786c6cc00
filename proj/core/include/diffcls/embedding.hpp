#pragma once

#include <span>
#include <string>
#include <vector>

#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

enum class EmbeddingKind { Sinusoidal, Learnable };

std::string to_string(EmbeddingKind kind);
EmbeddingKind parse_embedding_kind(const std::string& name);

inline constexpr double kSinusoidalBase = 10000.0;
inline constexpr double kLearnableInitStd = 0.02;

/// Transformer-style encoding: out[2i] = sin(t / 10000^(2i/dim)),
/// out[2i+1] = cos(t / 10000^(2i/dim)). No range check on t.
std::vector<double> sinusoidal_embedding(double t, std::size_t dim);

/// Timestep embedding shared by the conditional blocks of one network.
class TimeEmbedding {
 public:
  TimeEmbedding(EmbeddingKind kind, std::size_t dim, int steps, Rng& rng);

  EmbeddingKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }
  int steps() const { return steps_; }

  /// Embedding of a single timestep t in 1..T, shape [dim].
  Tensor embed(int t) const;
  /// One row per timestep, shape [B x dim]. Learnable rows take part in autodiff.
  Tensor embed(std::span<const int> t) const;

  /// The learnable table [T x dim]; empty for the sinusoidal kind.
  const Tensor& table() const { return table_; }
  Tensor& table() { return table_; }
  std::vector<Tensor> parameters() const;

 private:
  void check_t(int t) const;

  EmbeddingKind kind_;
  std::size_t dim_;
  int steps_;
  Tensor table_;
};

}  // namespace diffcls

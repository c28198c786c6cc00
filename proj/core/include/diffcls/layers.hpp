#pragma once

#include <span>
#include <string>
#include <vector>

#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

/// A named, writable view of one piece of model state (parameter or buffer).
/// Checkpoints serialize and restore through these.
struct StateEntry {
  std::string name;
  Shape shape;
  std::span<double> values;
};

using StateList = std::vector<StateEntry>;

inline void append_state(StateList& out, const std::string& name, Tensor& t) {
  out.push_back({name, t.shape(), t.mutable_data()});
}

/// y = x W + b over the last axis. W is [in x out].
class Linear {
 public:
  Linear() = default;
  /// Weights U(-1/sqrt(in), 1/sqrt(in)), bias zero.
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void parameters(std::vector<Tensor>& out) const;
  void state(const std::string& prefix, StateList& out);

  Tensor weight;
  Tensor bias;
};

class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  explicit BatchNorm1d(std::size_t width);

  Tensor forward(const Tensor& x, bool training);

  void parameters(std::vector<Tensor>& out) const;
  void state(const std::string& prefix, StateList& out);

  Tensor scale;
  Tensor shift;
  BatchNormStats stats;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);

  Tensor forward(const Tensor& x) const;

  void parameters(std::vector<Tensor>& out) const;
  void state(const std::string& prefix, StateList& out);

  Tensor scale;
  Tensor shift;
};

/// Multi-head self-attention over tokens [B x N x d]: per head
/// softmax(Q K^T / sqrt(d_head)) V, heads concatenated and projected.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng);

  /// When `weights` is non-null it receives the attention matrices,
  /// shape [B x heads x N x N].
  Tensor forward(const Tensor& tokens, Tensor* weights = nullptr) const;

  std::size_t heads() const { return heads_; }
  std::size_t model_dim() const { return model_dim_; }

  void parameters(std::vector<Tensor>& out) const;
  void state(const std::string& prefix, StateList& out);

  Linear query;
  Linear key;
  Linear value;
  Linear output;

 private:
  std::size_t model_dim_ = 0;
  std::size_t heads_ = 1;
};

}  // namespace diffcls

#include "diffcls/layers.hpp"

#include <cmath>

#include "diffcls/error.hpp"

namespace diffcls {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
  if (in == 0 || out == 0) throw ConfigError("linear layer: zero width");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> init(-bound, bound);
  std::vector<double> w(in * out);
  for (double& v : w) v = init(rng);
  weight = Tensor(Shape{in, out}, std::move(w), true);
  bias = Tensor(Shape{out}, 0.0, true);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.shape().back() != in_features()) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not end in " +
                         std::to_string(in_features()));
  }
  if (x.rank() == 1) return reshape(matmul(reshape(x, {1, x.dim(0)}), weight), {out_features()}) + bias;
  return matmul(x, weight) + bias;
}

void Linear::parameters(std::vector<Tensor>& out) const {
  out.push_back(weight);
  out.push_back(bias);
}

void Linear::state(const std::string& prefix, StateList& out) {
  append_state(out, prefix + ".weight", weight);
  append_state(out, prefix + ".bias", bias);
}

BatchNorm1d::BatchNorm1d(std::size_t width)
    : scale(Shape{width}, 1.0, true), shift(Shape{width}, 0.0, true) {
  stats.running_mean.assign(width, 0.0);
  stats.running_var.assign(width, 1.0);
}

Tensor BatchNorm1d::forward(const Tensor& x, bool training) {
  return batch_norm(x, scale, shift, stats, training);
}

void BatchNorm1d::parameters(std::vector<Tensor>& out) const {
  out.push_back(scale);
  out.push_back(shift);
}

void BatchNorm1d::state(const std::string& prefix, StateList& out) {
  append_state(out, prefix + ".scale", scale);
  append_state(out, prefix + ".shift", shift);
  const std::size_t width = stats.running_mean.size();
  out.push_back({prefix + ".running_mean", Shape{width}, stats.running_mean});
  out.push_back({prefix + ".running_var", Shape{width}, stats.running_var});
}

LayerNorm::LayerNorm(std::size_t width)
    : scale(Shape{width}, 1.0, true), shift(Shape{width}, 0.0, true) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, scale, shift); }

void LayerNorm::parameters(std::vector<Tensor>& out) const {
  out.push_back(scale);
  out.push_back(shift);
}

void LayerNorm::state(const std::string& prefix, StateList& out) {
  append_state(out, prefix + ".scale", scale);
  append_state(out, prefix + ".shift", shift);
}

MultiHeadAttention::MultiHeadAttention(std::size_t model_dim, std::size_t heads, Rng& rng)
    : query(model_dim, model_dim, rng),
      key(model_dim, model_dim, rng),
      value(model_dim, model_dim, rng),
      output(model_dim, model_dim, rng),
      model_dim_(model_dim),
      heads_(heads) {
  if (heads == 0 || model_dim % heads != 0) {
    throw ConfigError("attention: model dim " + std::to_string(model_dim) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
}

Tensor MultiHeadAttention::forward(const Tensor& tokens, Tensor* weights) const {
  if (tokens.rank() != 3 || tokens.dim(2) != model_dim_) {
    throw DimensionError("attention: expected [B x N x " + std::to_string(model_dim_) +
                         "] tokens, got " + shape_string(tokens.shape()));
  }
  const std::size_t batch = tokens.dim(0), count = tokens.dim(1);
  const std::size_t head_dim = model_dim_ / heads_;
  // [B x N x d] -> [(B*H) x N x d_head]
  auto split = [&](const Tensor& x) {
    return reshape(transpose(reshape(x, {batch, count, heads_, head_dim}), 1, 2),
                   {batch * heads_, count, head_dim});
  };
  const Tensor q = split(query.forward(tokens));
  const Tensor k = split(key.forward(tokens));
  const Tensor v = split(value.forward(tokens));
  const Tensor scores = matmul(q, transpose(k, 1, 2)) / std::sqrt(static_cast<double>(head_dim));
  const Tensor attn = softmax(scores, 2);
  if (weights != nullptr) *weights = reshape(attn, {batch, heads_, count, count});
  const Tensor mixed = matmul(attn, v);
  const Tensor merged =
      reshape(transpose(reshape(mixed, {batch, heads_, count, head_dim}), 1, 2),
              {batch, count, model_dim_});
  return output.forward(merged);
}

void MultiHeadAttention::parameters(std::vector<Tensor>& out) const {
  query.parameters(out);
  key.parameters(out);
  value.parameters(out);
  output.parameters(out);
}

void MultiHeadAttention::state(const std::string& prefix, StateList& out) {
  query.state(prefix + ".query", out);
  key.state(prefix + ".key", out);
  value.state(prefix + ".value", out);
  output.state(prefix + ".output", out);
}

}  // namespace diffcls

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "diffcls/embedding.hpp"
#include "diffcls/layers.hpp"
#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t numel() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

/// Image encoder variant; the strings match the ablation grid axis.
enum class EncoderKind { Linear, Attention };
enum class HiddenActivation { Softplus, Softmax };

std::string to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& name);
std::string to_string(HiddenActivation act);
HiddenActivation parse_hidden_activation(const std::string& name);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Linear;
  std::size_t hidden = 128;         // output feature width
  std::size_t attention_dim = 64;   // token width (attention only)
  std::size_t heads = 4;
  std::size_t patch = 4;
};

/// Maps a batch of images [B x ch x H x W] to features [B x out_dim].
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Tensor forward(const Tensor& images, bool training) = 0;
  virtual std::size_t out_dim() const = 0;
  virtual void parameters(std::vector<Tensor>& out) const = 0;
  virtual void state(const std::string& prefix, StateList& out) = 0;
};

/// Flatten, Linear(in, h), softplus, Linear(h, h).
class LinearEncoder final : public FeatureExtractor {
 public:
  LinearEncoder(ImageShape image, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& images, bool training) override;
  std::size_t out_dim() const override { return second_.out_features(); }
  void parameters(std::vector<Tensor>& out) const override;
  void state(const std::string& prefix, StateList& out) override;

 private:
  ImageShape image_;
  Linear first_;
  Linear second_;
};

/// Patch tokens from a convolution with kernel = stride = patch, plus a
/// learned position table, one multi-head self-attention block, mean pooling
/// over tokens, then the token combiner (layer norm and a linear map).
class PatchAttentionEncoder final : public FeatureExtractor {
 public:
  PatchAttentionEncoder(ImageShape image, const EncoderConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& images, bool training) override;
  /// As forward, additionally exporting attention weights [B x heads x N x N].
  Tensor encode(const Tensor& images, Tensor* attention_weights);
  std::size_t out_dim() const override { return combiner_.out_features(); }
  std::size_t token_count() const { return tokens_; }
  void parameters(std::vector<Tensor>& out) const override;
  void state(const std::string& prefix, StateList& out) override;

  MultiHeadAttention& attention() { return attention_; }
  Tensor& patch_weight() { return patch_weight_; }
  Tensor& patch_bias() { return patch_bias_; }
  Tensor& positions() { return positions_; }

 private:
  ImageShape image_;
  std::size_t patch_;
  std::size_t model_dim_;
  std::size_t tokens_;
  Tensor patch_weight_;  // [d x ch x p x p]
  Tensor patch_bias_;    // [d]
  Tensor positions_;     // [N x d]
  MultiHeadAttention attention_;
  LayerNorm norm_;
  Linear combiner_;
};

std::unique_ptr<FeatureExtractor> make_encoder(ImageShape image, const EncoderConfig& cfg,
                                               Rng& rng);

/// Pretrained classifier whose softmax output g(w) is the diffusion
/// endpoint mean.
class GuidanceClassifier {
 public:
  GuidanceClassifier(ImageShape image, std::size_t classes, const EncoderConfig& backbone,
                     Rng& rng);

  Tensor logits(const Tensor& images, bool training);
  /// Simplex rows [B x C], evaluation mode.
  Tensor predict(const Tensor& images);

  std::size_t classes() const { return classes_; }
  const ImageShape& image_shape() const { return image_; }
  Linear& head() { return head_; }
  FeatureExtractor& backbone() { return *backbone_; }

  std::vector<Tensor> parameters() const;
  StateList state();

 private:
  void check_images(const Tensor& images) const;

  ImageShape image_;
  std::size_t classes_;
  std::unique_ptr<FeatureExtractor> backbone_;
  Linear head_;
};

/// act(batch_norm(linear(x)) * time_proj(t_emb)); the time projection is
/// broadcast over the batch when t_emb is a single row.
class ConditionalModule {
 public:
  ConditionalModule(std::size_t in, std::size_t out, std::size_t embed_dim, Rng& rng);

  Tensor forward(const Tensor& x, const Tensor& t_emb, bool training,
                 HiddenActivation act = HiddenActivation::Softplus);

  std::size_t out_features() const { return linear.out_features(); }
  void parameters(std::vector<Tensor>& out) const;
  void state(const std::string& prefix, StateList& out);

  Linear linear;
  BatchNorm1d norm;
  Linear time_proj;
};

struct EpsilonConfig {
  EncoderConfig encoder;
  EmbeddingKind embedding = EmbeddingKind::Learnable;
  std::size_t embedding_dim = 128;
  HiddenActivation activation = HiddenActivation::Softplus;
  int steps = 10;
};

inline constexpr std::size_t kConditionalBlocks = 4;

/// Noise predictor eps(w, z_t, g, t): encoder features are multiplied with
/// an affine projection of concat(z_t, g), passed through four conditional
/// blocks sharing one timestep embedding, then mapped back to C outputs.
class EpsilonNetwork {
 public:
  EpsilonNetwork(ImageShape image, std::size_t classes, const EpsilonConfig& cfg, Rng& rng);

  /// images [B x ch x H x W], z_t and g [B x C], one timestep per row.
  Tensor forward(const Tensor& images, const Tensor& z_t, const Tensor& g,
                 std::span<const int> t, bool training);
  /// Single-sample convenience; evaluation mode. Returns [C].
  Tensor forward_one(const Tensor& image, const Tensor& z_t, const Tensor& g, int t);

  std::size_t classes() const { return classes_; }
  const ImageShape& image_shape() const { return image_; }
  const EpsilonConfig& config() const { return cfg_; }

  FeatureExtractor& encoder() { return *encoder_; }
  TimeEmbedding& embedding() { return embedding_; }
  Linear& label_proj() { return label_proj_; }
  std::vector<ConditionalModule>& blocks() { return blocks_; }
  Linear& output() { return output_; }

  std::vector<Tensor> parameters() const;
  StateList state();

 private:
  ImageShape image_;
  std::size_t classes_;
  EpsilonConfig cfg_;
  TimeEmbedding embedding_;
  std::unique_ptr<FeatureExtractor> encoder_;
  Linear label_proj_;
  std::vector<ConditionalModule> blocks_;
  Linear output_;
};

}  // namespace diffcls

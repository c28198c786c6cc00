#include "diffcls/networks.hpp"

#include <cmath>

#include "diffcls/error.hpp"

namespace diffcls {

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::Linear ? "linear" : "attention";
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "linear" || name == "mlp") return EncoderKind::Linear;
  if (name == "attention") return EncoderKind::Attention;
  throw ConfigError("unknown architecture '" + name + "' (expected linear|attention)");
}

std::string to_string(HiddenActivation act) {
  return act == HiddenActivation::Softplus ? "softplus" : "softmax";
}

HiddenActivation parse_hidden_activation(const std::string& name) {
  if (name == "softplus") return HiddenActivation::Softplus;
  if (name == "softmax") return HiddenActivation::Softmax;
  throw ConfigError("unknown hidden activation '" + name + "' (expected softplus|softmax)");
}

namespace {

void check_image_batch(const Tensor& images, const ImageShape& image, const char* who) {
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != image.channels || s[2] != image.height || s[3] != image.width) {
    throw UsageError(std::string(who) + ": expected images [B x " +
                     std::to_string(image.channels) + " x " + std::to_string(image.height) +
                     " x " + std::to_string(image.width) + "], got " + shape_string(s));
  }
}

}  // namespace

// ---------------------------------------------------------------- encoders

LinearEncoder::LinearEncoder(ImageShape image, std::size_t hidden, Rng& rng)
    : image_(image), first_(image.numel(), hidden, rng), second_(hidden, hidden, rng) {}

Tensor LinearEncoder::forward(const Tensor& images, bool /*training*/) {
  check_image_batch(images, image_, "linear encoder");
  const Tensor flat = reshape(images, {images.dim(0), image_.numel()});
  return second_.forward(softplus(first_.forward(flat)));
}

void LinearEncoder::parameters(std::vector<Tensor>& out) const {
  first_.parameters(out);
  second_.parameters(out);
}

void LinearEncoder::state(const std::string& prefix, StateList& out) {
  first_.state(prefix + ".first", out);
  second_.state(prefix + ".second", out);
}

PatchAttentionEncoder::PatchAttentionEncoder(ImageShape image, const EncoderConfig& cfg,
                                             Rng& rng)
    : image_(image), patch_(cfg.patch), model_dim_(cfg.attention_dim) {
  if (patch_ == 0 || image.height % patch_ != 0 || image.width % patch_ != 0) {
    throw ConfigError("patch attention: image " + std::to_string(image.height) + "x" +
                      std::to_string(image.width) + " is not divisible by patch size " +
                      std::to_string(patch_));
  }
  tokens_ = (image.height / patch_) * (image.width / patch_);
  const std::size_t fan_in = image.channels * patch_ * patch_;
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> init(-bound, bound);
  std::vector<double> w(model_dim_ * fan_in);
  for (double& v : w) v = init(rng);
  patch_weight_ = Tensor(Shape{model_dim_, image.channels, patch_, patch_}, std::move(w), true);
  patch_bias_ = Tensor(Shape{model_dim_}, 0.0, true);
  std::normal_distribution<double> pos_init(0.0, 0.02);
  std::vector<double> pos(tokens_ * model_dim_);
  for (double& v : pos) v = pos_init(rng);
  positions_ = Tensor(Shape{tokens_, model_dim_}, std::move(pos), true);
  attention_ = MultiHeadAttention(model_dim_, cfg.heads, rng);
  norm_ = LayerNorm(model_dim_);
  combiner_ = Linear(model_dim_, cfg.hidden, rng);
}

Tensor PatchAttentionEncoder::forward(const Tensor& images, bool /*training*/) {
  return encode(images, nullptr);
}

Tensor PatchAttentionEncoder::encode(const Tensor& images, Tensor* attention_weights) {
  check_image_batch(images, image_, "patch attention encoder");
  const std::size_t batch = images.dim(0);
  const Tensor patches = conv2d(images, patch_weight_, patch_bias_, patch_);  // [B x d x h x w]
  const Tensor tokens =
      transpose(reshape(patches, {batch, model_dim_, tokens_}), 1, 2) + positions_;
  const Tensor attended = attention_.forward(tokens, attention_weights);
  const Tensor pooled = mean(attended, 1);  // [B x d]
  return combiner_.forward(norm_.forward(pooled));
}

void PatchAttentionEncoder::parameters(std::vector<Tensor>& out) const {
  out.push_back(patch_weight_);
  out.push_back(patch_bias_);
  out.push_back(positions_);
  attention_.parameters(out);
  norm_.parameters(out);
  combiner_.parameters(out);
}

void PatchAttentionEncoder::state(const std::string& prefix, StateList& out) {
  append_state(out, prefix + ".patch.weight", patch_weight_);
  append_state(out, prefix + ".patch.bias", patch_bias_);
  append_state(out, prefix + ".positions", positions_);
  attention_.state(prefix + ".attention", out);
  norm_.state(prefix + ".norm", out);
  combiner_.state(prefix + ".combiner", out);
}

std::unique_ptr<FeatureExtractor> make_encoder(ImageShape image, const EncoderConfig& cfg,
                                               Rng& rng) {
  if (cfg.hidden == 0) throw ConfigError("encoder: hidden width must be positive");
  if (cfg.kind == EncoderKind::Linear) {
    return std::make_unique<LinearEncoder>(image, cfg.hidden, rng);
  }
  return std::make_unique<PatchAttentionEncoder>(image, cfg, rng);
}

// ---------------------------------------------------------------- guidance

GuidanceClassifier::GuidanceClassifier(ImageShape image, std::size_t classes,
                                       const EncoderConfig& backbone, Rng& rng)
    : image_(image), classes_(classes) {
  if (classes < 2) throw ConfigError("guidance classifier: need at least 2 classes");
  backbone_ = make_encoder(image, backbone, rng);
  head_ = Linear(backbone_->out_dim(), classes, rng);
}

void GuidanceClassifier::check_images(const Tensor& images) const {
  check_image_batch(images, image_, "guidance classifier");
}

Tensor GuidanceClassifier::logits(const Tensor& images, bool training) {
  check_images(images);
  return head_.forward(relu(backbone_->forward(images, training)));
}

Tensor GuidanceClassifier::predict(const Tensor& images) {
  NoGradGuard no_grad;
  return softmax(logits(images, false), 1);
}

std::vector<Tensor> GuidanceClassifier::parameters() const {
  std::vector<Tensor> out;
  backbone_->parameters(out);
  head_.parameters(out);
  return out;
}

StateList GuidanceClassifier::state() {
  StateList out;
  backbone_->state("backbone", out);
  head_.state("head", out);
  return out;
}

// ---------------------------------------------------------------- conditional

ConditionalModule::ConditionalModule(std::size_t in, std::size_t out, std::size_t embed_dim,
                                     Rng& rng)
    : linear(in, out, rng), norm(out), time_proj(embed_dim, out, rng) {}

Tensor ConditionalModule::forward(const Tensor& x, const Tensor& t_emb, bool training,
                                  HiddenActivation act) {
  if (x.rank() != 2) {
    throw UsageError("conditional module: expected [B x d] input, got " +
                     shape_string(x.shape()));
  }
  if (x.dim(1) != linear.in_features() || t_emb.rank() == 0 || t_emb.rank() > 2 ||
      t_emb.shape().back() != time_proj.in_features()) {
    throw UsageError("conditional module: expected [B x " + std::to_string(linear.in_features()) +
                     "] input and " + std::to_string(time_proj.in_features()) +
                     "-wide time embedding, got " + shape_string(x.shape()) + " and " +
                     shape_string(t_emb.shape()));
  }
  if (t_emb.rank() == 2 && t_emb.dim(0) != x.dim(0)) {
    throw UsageError("conditional module: " + std::to_string(t_emb.dim(0)) +
                     " time embeddings for a batch of " + std::to_string(x.dim(0)));
  }
  const Tensor modulated = norm.forward(linear.forward(x), training) * time_proj.forward(t_emb);
  return act == HiddenActivation::Softplus ? softplus(modulated) : softmax(modulated, 1);
}

void ConditionalModule::parameters(std::vector<Tensor>& out) const {
  linear.parameters(out);
  norm.parameters(out);
  time_proj.parameters(out);
}

void ConditionalModule::state(const std::string& prefix, StateList& out) {
  linear.state(prefix + ".linear", out);
  norm.state(prefix + ".norm", out);
  time_proj.state(prefix + ".time_proj", out);
}

// ---------------------------------------------------------------- epsilon

EpsilonNetwork::EpsilonNetwork(ImageShape image, std::size_t classes, const EpsilonConfig& cfg,
                               Rng& rng)
    : image_(image),
      classes_(classes),
      cfg_(cfg),
      embedding_(cfg.embedding, cfg.embedding_dim, cfg.steps, rng) {
  if (classes < 2) throw ConfigError("epsilon network: need at least 2 classes");
  encoder_ = make_encoder(image, cfg.encoder, rng);
  const std::size_t hidden = encoder_->out_dim();
  label_proj_ = Linear(2 * classes, hidden, rng);
  blocks_.reserve(kConditionalBlocks);
  for (std::size_t i = 0; i < kConditionalBlocks; ++i) {
    blocks_.emplace_back(hidden, hidden, cfg.embedding_dim, rng);
  }
  output_ = Linear(hidden, classes, rng);
}

Tensor EpsilonNetwork::forward(const Tensor& images, const Tensor& z_t, const Tensor& g,
                               std::span<const int> t, bool training) {
  const std::size_t batch = images.rank() == 4 ? images.dim(0) : 0;
  const Shape labels{batch, classes_};
  if (z_t.shape() != labels || g.shape() != labels || t.size() != batch) {
    throw UsageError("epsilon network: expected z_t and g of shape " + shape_string(labels) +
                     " and " + std::to_string(batch) + " timesteps, got " +
                     shape_string(z_t.shape()) + ", " + shape_string(g.shape()) + ", " +
                     std::to_string(t.size()));
  }
  const Tensor features = encoder_->forward(images, training);
  const Tensor processed = label_proj_.forward(concat({z_t, g}, 1));
  Tensor h = features * processed;
  const Tensor t_emb = embedding_.embed(t);
  for (auto& block : blocks_) h = block.forward(h, t_emb, training, cfg_.activation);
  return output_.forward(h);
}

Tensor EpsilonNetwork::forward_one(const Tensor& image, const Tensor& z_t, const Tensor& g,
                                   int t) {
  const Shape& s = image.shape();
  const Tensor batch_image =
      s.size() == 3 ? reshape(image, {1, s[0], s[1], s[2]}) : image;
  const int ts[1] = {t};
  const Tensor out = forward(batch_image, reshape(z_t, {1, classes_}), reshape(g, {1, classes_}),
                             ts, false);
  return reshape(out, {classes_});
}

std::vector<Tensor> EpsilonNetwork::parameters() const {
  std::vector<Tensor> out = embedding_.parameters();
  encoder_->parameters(out);
  label_proj_.parameters(out);
  for (const auto& block : blocks_) block.parameters(out);
  output_.parameters(out);
  return out;
}

StateList EpsilonNetwork::state() {
  StateList out;
  if (embedding_.kind() == EmbeddingKind::Learnable) {
    append_state(out, "embedding.table", embedding_.table());
  }
  encoder_->state("encoder", out);
  label_proj_.state("label_proj", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].state("block" + std::to_string(i), out);
  }
  output_.state("output", out);
  return out;
}

}  // namespace diffcls

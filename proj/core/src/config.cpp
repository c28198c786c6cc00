#include "diffcls/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "diffcls/error.hpp"
#include "json.hpp"

namespace diffcls {

using nlohmann::json;

namespace {

json train_to_json(const TrainConfig& t) {
  return {
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"grad_clip", t.grad_clip},
      {"lr", t.adam.lr},
      {"beta1", t.adam.beta1},
      {"beta2", t.adam.beta2},
      {"eps", t.adam.eps},
      {"weight_decay", t.adam.weight_decay},
      {"lr_schedule", to_string(t.lr_schedule)},
      {"plateau_factor", t.plateau_factor},
      {"plateau_patience", t.plateau_patience},
      {"strict", t.strict},
  };
}

void train_from_json(const json& j, TrainConfig& t) {
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.grad_clip = j.value("grad_clip", t.grad_clip);
  t.adam.lr = j.value("lr", t.adam.lr);
  t.adam.beta1 = j.value("beta1", t.adam.beta1);
  t.adam.beta2 = j.value("beta2", t.adam.beta2);
  t.adam.eps = j.value("eps", t.adam.eps);
  t.adam.weight_decay = j.value("weight_decay", t.adam.weight_decay);
  t.lr_schedule = parse_lr_schedule(j.value("lr_schedule", to_string(t.lr_schedule)));
  t.plateau_factor = j.value("plateau_factor", t.plateau_factor);
  t.plateau_patience = j.value("plateau_patience", t.plateau_patience);
  t.strict = j.value("strict", t.strict);
}

json config_to_json(const RunConfig& c, bool include_output) {
  json j = {
      {"seed", c.seed},
      {"data",
       {
           {"source", c.data.source},
           {"path", c.data.path.string()},
           {"kind", to_string(c.data.synthetic.kind)},
           {"n_per_class", c.data.synthetic.n_per_class},
           {"image_size", c.data.synthetic.image_size},
           {"noise_sigma", c.data.synthetic.noise_sigma},
           {"train_frac", c.data.train_frac},
           {"val_frac", c.data.val_frac},
           {"test_frac", c.data.test_frac},
           {"augment", c.data.augment},
           {"crop_size", c.data.augmentation.crop_size},
           {"flip_prob", c.data.augmentation.flip_prob},
           {"rotate", c.data.augmentation.rotate},
           {"positive_class", c.data.positive_class},
       }},
      {"schedule",
       {
           {"type", to_string(c.schedule.kind)},
           {"T", c.schedule.steps},
           {"beta1", c.schedule.beta1},
           {"betaT", c.schedule.betaT},
           {"s", c.schedule.offset},
       }},
      {"embedding", {{"kind", to_string(c.embedding.kind)}, {"dim", c.embedding.dim}}},
      {"architecture",
       {
           {"encoder", to_string(c.encoder.kind)},
           {"hidden", c.encoder.hidden},
           {"attention_dim", c.encoder.attention_dim},
           {"heads", c.encoder.heads},
           {"patch", c.encoder.patch},
           {"activation", to_string(c.activation)},
           {"guidance_backbone", to_string(c.guidance_backbone.kind)},
           {"guidance_hidden", c.guidance_backbone.hidden},
           {"guidance_attention_dim", c.guidance_backbone.attention_dim},
           {"guidance_heads", c.guidance_backbone.heads},
           {"guidance_patch", c.guidance_backbone.patch},
       }},
      {"guidance_train", train_to_json(c.guidance_train)},
      {"diffusion_train", train_to_json(c.diffusion_train)},
      {"inference", {{"n_samples", c.inference.n_samples}}},
  };
  if (include_output) j["output_dir"] = c.output_dir.string();
  return j;
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir.string());
  if (j.contains("data")) {
    const json& d = j["data"];
    c.data.source = d.value("source", c.data.source);
    c.data.path = d.value("path", c.data.path.string());
    c.data.synthetic.kind = parse_synthetic_kind(d.value("kind", to_string(c.data.synthetic.kind)));
    c.data.synthetic.n_per_class = d.value("n_per_class", c.data.synthetic.n_per_class);
    c.data.synthetic.image_size = d.value("image_size", c.data.synthetic.image_size);
    c.data.synthetic.noise_sigma = d.value("noise_sigma", c.data.synthetic.noise_sigma);
    c.data.train_frac = d.value("train_frac", c.data.train_frac);
    c.data.val_frac = d.value("val_frac", c.data.val_frac);
    c.data.test_frac = d.value("test_frac", c.data.test_frac);
    c.data.augment = d.value("augment", c.data.augment);
    c.data.augmentation.crop_size = d.value("crop_size", c.data.augmentation.crop_size);
    c.data.augmentation.flip_prob = d.value("flip_prob", c.data.augmentation.flip_prob);
    c.data.augmentation.rotate = d.value("rotate", c.data.augmentation.rotate);
    c.data.positive_class = d.value("positive_class", c.data.positive_class);
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    c.schedule.kind = parse_schedule_kind(s.value("type", to_string(c.schedule.kind)));
    c.schedule.steps = s.value("T", c.schedule.steps);
    c.schedule.beta1 = s.value("beta1", c.schedule.beta1);
    c.schedule.betaT = s.value("betaT", c.schedule.betaT);
    c.schedule.offset = s.value("s", c.schedule.offset);
  }
  if (j.contains("embedding")) {
    const json& e = j["embedding"];
    c.embedding.kind = parse_embedding_kind(e.value("kind", to_string(c.embedding.kind)));
    c.embedding.dim = e.value("dim", c.embedding.dim);
  }
  if (j.contains("architecture")) {
    const json& a = j["architecture"];
    c.encoder.kind = parse_encoder_kind(a.value("encoder", to_string(c.encoder.kind)));
    c.encoder.hidden = a.value("hidden", c.encoder.hidden);
    c.encoder.attention_dim = a.value("attention_dim", c.encoder.attention_dim);
    c.encoder.heads = a.value("heads", c.encoder.heads);
    c.encoder.patch = a.value("patch", c.encoder.patch);
    c.activation = parse_hidden_activation(a.value("activation", to_string(c.activation)));
    c.guidance_backbone.kind =
        parse_encoder_kind(a.value("guidance_backbone", to_string(c.guidance_backbone.kind)));
    c.guidance_backbone.hidden = a.value("guidance_hidden", c.guidance_backbone.hidden);
    c.guidance_backbone.attention_dim =
        a.value("guidance_attention_dim", c.guidance_backbone.attention_dim);
    c.guidance_backbone.heads = a.value("guidance_heads", c.guidance_backbone.heads);
    c.guidance_backbone.patch = a.value("guidance_patch", c.guidance_backbone.patch);
  }
  if (j.contains("guidance_train")) train_from_json(j["guidance_train"], c.guidance_train);
  if (j.contains("diffusion_train")) train_from_json(j["diffusion_train"], c.diffusion_train);
  if (j.contains("inference")) {
    c.inference.n_samples = j["inference"].value("n_samples", c.inference.n_samples);
  }
  return c;
}

void check_known_keys(const json& given, const json& known, const std::string& prefix) {
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw ConfigError("config: unknown key '" + prefix + key + "'");
    if (known[key].is_object()) {
      if (!value.is_object()) throw ConfigError("config: '" + prefix + key + "' must be a section");
      check_known_keys(value, known[key], prefix + key + ".");
    }
  }
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

Schedule ScheduleConfig::build() const {
  return kind == ScheduleKind::Linear ? Schedule::linear(steps, beta1, betaT)
                                      : Schedule::cosine(steps, offset);
}

RunConfig::RunConfig() {
  guidance_train.epochs = 20;
  diffusion_train.epochs = 50;
}

void RunConfig::validate() const {
  if (data.source != "synthetic" && data.source != "file") {
    throw ConfigError("data.source must be synthetic or file");
  }
  if (data.source == "file" && data.path.empty()) throw ConfigError("data.path is required");
  const double fracs = data.train_frac + data.val_frac + data.test_frac;
  if (!(data.train_frac > 0.0 && data.val_frac > 0.0 && data.test_frac > 0.0) ||
      std::abs(fracs - 1.0) > 1e-9) {
    throw ConfigError("data split fractions must be positive and sum to 1");
  }
  if (embedding.dim == 0) throw ConfigError("embedding.dim must be positive");
  if (embedding.kind == EmbeddingKind::Sinusoidal && embedding.dim % 2 != 0) {
    throw ConfigError("embedding.dim must be even for sinusoidal embeddings");
  }
  if (inference.n_samples == 0) throw ConfigError("inference.n_samples must be >= 1");
  if (encoder.hidden == 0 || guidance_backbone.hidden == 0) {
    throw ConfigError("architecture hidden widths must be positive");
  }
  guidance_train.validate();
  diffusion_train.validate();
  (void)schedule.build();
}

EpsilonConfig RunConfig::epsilon_config() const {
  EpsilonConfig e;
  e.encoder = encoder;
  e.embedding = embedding.kind;
  e.embedding_dim = embedding.dim;
  e.activation = activation;
  e.steps = schedule.steps;
  return e;
}

std::string RunConfig::variant_name() const {
  return std::string(encoder.kind == EncoderKind::Linear ? "Lin" : "Att") + "-" +
         (schedule.kind == ScheduleKind::Linear ? "Lin" : "Cos") + "-" +
         (embedding.kind == EmbeddingKind::Learnable ? "Lin" : "Sin");
}

std::string RunConfig::to_json() const { return config_to_json(*this, true).dump(2); }

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  check_known_keys(j, config_to_json(RunConfig{}, true), "");
  try {
    return config_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::string RunConfig::hash() const { return fnv1a_hex(config_to_json(*this, false).dump()); }

std::string RunConfig::guidance_hash() const {
  const json full = config_to_json(*this, false);
  const json& arch = full["architecture"];
  json part = {
      {"seed", seed},
      {"data", full["data"]},
      {"guidance_backbone", arch["guidance_backbone"]},
      {"guidance_hidden", arch["guidance_hidden"]},
      {"guidance_attention_dim", arch["guidance_attention_dim"]},
      {"guidance_heads", arch["guidance_heads"]},
      {"guidance_patch", arch["guidance_patch"]},
      {"guidance_train", full["guidance_train"]},
  };
  return fnv1a_hex(part.dump());
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return RunConfig::from_json(ss.str());
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write config " + path.string());
  os << cfg.to_json() << '\n';
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json doc = config_to_json(cfg, true);
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("override: unknown config key '" + key + "'");
    }
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("override: '" + key + "' names a section");
  if (node->is_string() && !value.is_string()) value = raw;
  *node = value;
  try {
    cfg = config_from_json(doc);
  } catch (const json::exception& e) {
    throw ConfigError("override '" + assignment + "': " + e.what());
  }
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  return mix_seed(seed, static_cast<std::uint64_t>(stream));
}

}  // namespace diffcls

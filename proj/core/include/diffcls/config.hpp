#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "diffcls/data.hpp"
#include "diffcls/embedding.hpp"
#include "diffcls/networks.hpp"
#include "diffcls/schedule.hpp"
#include "diffcls/trainer.hpp"

namespace diffcls {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | file
  std::filesystem::path path;        // DSET file when source == file
  SyntheticSpec synthetic;
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  bool augment = true;
  AugmentConfig augmentation;
  std::size_t positive_class = 1;
};

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::Cosine;
  int steps = 10;
  double beta1 = kDefaultBeta1;
  double betaT = kDefaultBetaT;
  double offset = kDefaultCosineOffset;

  Schedule build() const;
};

struct EmbeddingConfig {
  EmbeddingKind kind = EmbeddingKind::Learnable;
  std::size_t dim = 128;
};

struct InferenceConfig {
  std::size_t n_samples = 10;
};

/// Everything needed to reproduce a run. Serialized as a JSON document of
/// nested sections; see `to_json` for the layout.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  DataConfig data;
  ScheduleConfig schedule;
  EmbeddingConfig embedding;
  EncoderConfig encoder;            // epsilon-network image encoder
  HiddenActivation activation = HiddenActivation::Softplus;
  EncoderConfig guidance_backbone;  // guidance classifier feature extractor
  TrainConfig guidance_train;
  TrainConfig diffusion_train;
  InferenceConfig inference;

  RunConfig();

  void validate() const;
  EpsilonConfig epsilon_config() const;
  /// Table-style variant tag: architecture-schedule-embedding, e.g. "Lin-Cos-Lin".
  std::string variant_name() const;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);

  /// 16 hex digits of FNV-1a over the canonical JSON (output_dir excluded).
  std::string hash() const;
  /// Hash of the sections a pretrained guidance classifier depends on.
  std::string guidance_hash() const;
};

RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Applies "section.key=value"; the value is parsed as JSON when possible and
/// taken as a string otherwise.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// Stream seeds for the parts of a run.
enum class SeedStream : std::uint64_t {
  Data = 1,
  Split = 2,
  GuidanceInit = 3,
  GuidanceTrain = 4,
  DiffusionInit = 5,
  DiffusionTrain = 6,
  Inference = 7,
  Augment = 8,
};

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

}  // namespace diffcls

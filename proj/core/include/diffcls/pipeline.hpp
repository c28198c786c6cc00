#pragma once

// End-to-end workflows behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "diffcls/checkpoint.hpp"
#include "diffcls/config.hpp"
#include "diffcls/data.hpp"
#include "diffcls/diffusion.hpp"
#include "diffcls/metrics.hpp"
#include "diffcls/networks.hpp"
#include "diffcls/trainer.hpp"

namespace diffcls {

struct PreparedData {
  Dataset data;
  Splits splits;
};

/// Generates (or loads) the dataset named by the config and splits it.
PreparedData prepare_data(const RunConfig& cfg);

std::unique_ptr<GuidanceClassifier> build_guidance(const RunConfig& cfg, ImageShape image,
                                                   std::size_t classes);
std::unique_ptr<EpsilonNetwork> build_epsilon(const RunConfig& cfg, ImageShape image,
                                              std::size_t classes, std::uint64_t init_seed);

/// Cross-entropy training on the train split with validation each epoch.
TrainLog train_guidance(GuidanceClassifier& model, const PreparedData& prepared,
                        const RunConfig& cfg);

/// Noise-estimation training with the guidance classifier frozen.
TrainLog train_diffusion(EpsilonNetwork& net, GuidanceClassifier& guidance,
                         const PreparedData& prepared, const RunConfig& cfg,
                         std::uint64_t train_seed);

MetricsReport evaluate_guidance(GuidanceClassifier& model, const Dataset& data,
                                std::span<const std::size_t> indices, std::size_t positive_class);

struct DiffusionEvaluation {
  MetricsReport report;
  std::vector<Prediction> predictions;
};

/// Reverse-process classification of `indices`; image k of the list uses
/// chain streams derived from (seed, k).
DiffusionEvaluation evaluate_diffusion(EpsilonNetwork& net, GuidanceClassifier& guidance,
                                       const Schedule& schedule, const Dataset& data,
                                       std::span<const std::size_t> indices, std::size_t n_samples,
                                       std::uint64_t seed, std::size_t positive_class);

const std::vector<std::size_t>& split_indices(const Splits& splits, const std::string& name);

/// Seeds of the diffusion stage of a run. Ablation cells use the same ones,
/// so a cell reproduces a standalone run of its config.
struct DiffusionSeeds {
  std::uint64_t init = 0;
  std::uint64_t train = 0;
  std::uint64_t inference = 0;
};

DiffusionSeeds diffusion_seeds(std::uint64_t seed);

// ---------------------------------------------------------------- commands

/// Writes the configured dataset to `out`; returns the dataset.
Dataset cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out);

struct GuidanceRun {
  std::filesystem::path checkpoint;
  TrainLog log;
  MetricsReport test;
};

/// Trains the guidance classifier into <output_dir>/guidance.ckpt.
GuidanceRun cmd_pretrain_guidance(const RunConfig& cfg);

struct DiffusionRun {
  std::filesystem::path checkpoint;
  TrainLog log;
};

/// Trains the epsilon network into <output_dir>/diffusion.ckpt. The guidance
/// checkpoint must have been trained for the same data and guidance settings.
DiffusionRun cmd_train_diffusion(const RunConfig& cfg, const std::filesystem::path& guidance_ckpt);

/// Evaluates a checkpoint on a split and writes metrics_<split>.json/.csv
/// into `out_dir` (default: the checkpoint's directory). When `expected` is
/// given its hash must match the checkpoint's.
MetricsReport cmd_evaluate(const std::filesystem::path& checkpoint, const std::string& split,
                           const std::filesystem::path& out_dir = {},
                           const RunConfig* expected = nullptr);

/// Writes every intermediate state of `n_chains` reverse chains for one
/// image of `split` as CSV (chain,t,z0,...,z{C-1}).
std::vector<TrajectoryPoint> cmd_sample_trajectory(const std::filesystem::path& checkpoint,
                                                   const std::string& split, std::size_t index,
                                                   std::size_t n_chains, std::uint64_t seed,
                                                   const std::filesystem::path& out_csv);

struct AblationCell {
  std::string group;    // "grid" or "timesteps"
  std::string variant;  // e.g. Lin-Cos-Lin
  RunConfig config;
};

/// The 8 architecture x schedule x embedding cells followed by the T = 10,
/// 20, 30 cells (Lin-Cos-Lin otherwise).
std::vector<AblationCell> ablation_cells(const RunConfig& base);

struct AblationRow {
  AblationCell cell;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
};

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

/// Runs every cell on the test split and writes the CSV to `out_csv` (if
/// non-empty). The guidance classifier is trained once and shared. A failing
/// cell is recorded and the grid continues.
std::vector<AblationRow> cmd_ablate(const RunConfig& base, const std::filesystem::path& out_csv,
                                    std::size_t threads = 1);

}  // namespace diffcls

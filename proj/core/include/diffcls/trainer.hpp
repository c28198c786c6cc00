#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "diffcls/random.hpp"
#include "diffcls/tensor.hpp"

namespace diffcls {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});

  /// One update from the gradients currently stored on the parameters.
  /// Throws UsageError if any parameter has no gradient.
  void step();
  void zero_grad();

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::uint64_t step_count() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  std::vector<Tensor>& params() { return params_; }

  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t steps_ = 0;
};

/// Rescales all gradients so their global L2 norm is at most `threshold`.
/// Returns the norm before clipping.
double clip_gradients(std::span<Tensor> params, double threshold);

enum class LrSchedule { None, Plateau };

std::string to_string(LrSchedule schedule);
LrSchedule parse_lr_schedule(const std::string& name);

struct TrainConfig {
  int epochs = 50;
  std::size_t batch_size = 32;
  double grad_clip = 1.0;
  LrSchedule lr_schedule = LrSchedule::Plateau;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  std::uint64_t seed = 0;
  std::filesystem::path log_path;  // empty: no CSV
  bool strict = false;
  AdamConfig adam;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_ce = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::uint64_t optimizer_steps = 0;

  static std::string csv_header();
  static std::string csv_row(const EpochRecord& r);
  std::string to_csv() const;
};

struct BatchResult {
  Tensor loss;  // scalar
  std::size_t correct = 0;
  std::size_t count = 0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  double cross_entropy = 0.0;
  double mse = 0.0;
};

/// Builds the loss of one batch; `batch` holds positions 0..n_train-1.
using BatchFn = std::function<BatchResult(std::span<const std::size_t> batch, Rng& rng)>;
/// Validation after each epoch (1-based).
using EvalFn = std::function<EvalResult(int epoch)>;

/// Epoch loop: seeded shuffle, then per batch loss -> backward -> clip ->
/// Adam step. A trailing batch of one sample is merged into the previous
/// batch. Reduce-on-plateau halves the learning rate once validation loss
/// has not improved for more than `plateau_patience` epochs.
TrainLog fit(std::vector<Tensor> params, std::size_t n_train, const BatchFn& batch_fn,
             const EvalFn& eval_fn, const TrainConfig& cfg);

}  // namespace diffcls

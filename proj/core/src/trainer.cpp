#include "diffcls/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "diffcls/error.hpp"

namespace diffcls {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) {
      throw UsageError("adam: parameter " + std::to_string(i) + " " +
                       shape_string(params_[i].shape()) + " has no gradient");
    }
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correct1 = 1.0 - std::pow(cfg_.beta1, t);
  const double correct2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i].mutable_data();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double grad = g[j] + cfg_.weight_decay * w[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad * grad;
      const double m_hat = m[j] / correct1;
      const double v_hat = v[j] / correct2;
      w[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double clip_gradients(std::span<Tensor> params, double threshold) {
  if (!(threshold > 0.0)) throw UsageError("clip_gradients: threshold must be > 0");
  double total = 0.0;
  for (const auto& p : params)
    for (double g : p.grad()) total += g * g;
  const double norm = std::sqrt(total);
  if (norm > threshold) {
    const double scale = threshold / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

std::string to_string(LrSchedule schedule) {
  return schedule == LrSchedule::None ? "none" : "plateau";
}

LrSchedule parse_lr_schedule(const std::string& name) {
  if (name == "none") return LrSchedule::None;
  if (name == "plateau") return LrSchedule::Plateau;
  throw ConfigError("unknown lr schedule '" + name + "' (expected none|plateau)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  if (!(grad_clip > 0.0)) throw ConfigError("train config: grad_clip must be > 0");
  if (!(adam.lr > 0.0)) throw ConfigError("train config: learning rate must be > 0");
  if (lr_schedule == LrSchedule::Plateau &&
      (!(plateau_factor > 0.0 && plateau_factor < 1.0) || plateau_patience < 0)) {
    throw ConfigError("train config: plateau factor must lie in (0, 1), patience >= 0");
  }
}

std::string TrainLog::csv_header() {
  return "epoch,train_loss,train_accuracy,val_loss,val_accuracy,val_ce,val_mse,lr";
}

std::string TrainLog::csv_row(const EpochRecord& r) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << r.epoch << ',' << r.train_loss << ',' << r.train_accuracy << ',' << r.val_loss << ','
     << r.val_accuracy << ',' << r.val_ce << ',' << r.val_mse << ',' << r.lr;
  return os.str();
}

std::string TrainLog::to_csv() const {
  std::string out = csv_header() + "\n";
  for (const auto& r : epochs) out += csv_row(r) + "\n";
  return out;
}

TrainLog fit(std::vector<Tensor> params, std::size_t n_train, const BatchFn& batch_fn,
             const EvalFn& eval_fn, const TrainConfig& cfg) {
  cfg.validate();
  if (n_train == 0) throw UsageError("fit: empty training set");
  StrictModeGuard strict(cfg.strict);

  std::ofstream log_file;
  if (!cfg.log_path.empty()) {
    log_file.open(cfg.log_path);
    if (!log_file) throw ConfigError("fit: cannot open log " + cfg.log_path.string());
    log_file << TrainLog::csv_header() << '\n';
  }

  Adam optimizer(params, cfg.adam);
  Rng rng = make_rng(cfg.seed);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;
  TrainLog log;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::pair<std::size_t, std::size_t>> batches;  // [begin, end)
    for (std::size_t b = 0; b < n_train; b += cfg.batch_size) {
      batches.emplace_back(b, std::min(n_train, b + cfg.batch_size));
    }
    if (batches.size() > 1 && batches.back().second - batches.back().first == 1) {
      batches.pop_back();
      batches.back().second = n_train;
    }

    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, counted = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto [begin, end] = batches[bi];
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      optimizer.zero_grad();
      BatchResult result = batch_fn(batch, rng);
      const double loss = result.loss.item();
      if (!std::isfinite(loss)) {
        if (cfg.strict) {
          throw NumericError("fit: non-finite loss " + std::to_string(loss) + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(bi + 1));
        }
        continue;
      }
      result.loss.backward();
      for (auto& p : optimizer.params())
        if (!p.has_grad()) p.mutable_grad();  // untouched parameters get a zero gradient
      clip_gradients(optimizer.params(), cfg.grad_clip);
      optimizer.step();
      loss_sum += loss * static_cast<double>(batch.size());
      seen += batch.size();
      correct += result.correct;
      counted += result.count;
    }

    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = seen ? loss_sum / static_cast<double>(seen) : std::nan("");
    record.train_accuracy = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
    record.lr = optimizer.lr();
    if (eval_fn) {
      const EvalResult val = eval_fn(epoch);
      record.val_loss = val.loss;
      record.val_accuracy = val.accuracy;
      record.val_ce = val.cross_entropy;
      record.val_mse = val.mse;
      if (cfg.lr_schedule == LrSchedule::Plateau) {
        if (val.loss < best_val) {
          best_val = val.loss;
          bad_epochs = 0;
        } else if (++bad_epochs > cfg.plateau_patience) {
          optimizer.set_lr(optimizer.lr() * cfg.plateau_factor);
          bad_epochs = 0;
        }
      }
    }
    log.epochs.push_back(record);
    if (log_file) log_file << TrainLog::csv_row(record) << '\n' << std::flush;
  }
  optimizer.zero_grad();
  log.optimizer_steps = optimizer.step_count();
  return log;
}

}  // namespace diffcls

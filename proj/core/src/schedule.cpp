#include "diffcls/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffcls/error.hpp"

namespace diffcls {

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::Linear ? "linear" : "cosine";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule '" + name + "' (expected linear|cosine)");
}

Schedule Schedule::linear(int steps, double beta1, double betaT) {
  if (steps < 2) throw ConfigError("linear schedule: T must be >= 2");
  if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0)) {
    throw ConfigError("linear schedule: require 0 < beta1 <= betaT < 1");
  }
  Schedule s;
  s.kind_ = ScheduleKind::Linear;
  s.steps_ = steps;
  s.beta1_ = beta1;
  s.betaT_ = betaT;
  s.gamma_.resize(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    s.gamma_[static_cast<std::size_t>(t - 1)] =
        beta1 + static_cast<double>(t - 1) / static_cast<double>(steps - 1) * (betaT - beta1);
  }
  s.gamma_.back() = betaT;
  s.fill_derived();
  return s;
}

Schedule Schedule::cosine(int steps, double offset) {
  if (steps < 2) throw ConfigError("cosine schedule: T must be >= 2");
  if (!(offset > 0.0)) throw ConfigError("cosine schedule: offset s must be > 0");
  const double big_t = static_cast<double>(steps);
  auto f = [&](double u) {
    const double c = std::cos((u / big_t + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  Schedule s;
  s.kind_ = ScheduleKind::Cosine;
  s.steps_ = steps;
  s.offset_ = offset;
  s.gamma_.resize(static_cast<std::size_t>(steps));
  const double f0 = f(0.0);
  for (int t = 1; t <= steps; ++t) {
    const double prev = f(t - 1.0) / f0;
    const double cur = f(static_cast<double>(t)) / f0;
    s.gamma_[static_cast<std::size_t>(t - 1)] =
        std::clamp(1.0 - cur / prev, kCosineMinNoise, kCosineMaxNoise);
  }
  s.fill_derived();
  return s;
}

Schedule Schedule::from_gammas(std::vector<double> gammas) {
  if (gammas.size() < 2) throw ConfigError("schedule: T must be >= 2");
  for (double g : gammas) {
    if (!(g > 0.0 && g < 1.0)) throw ConfigError("schedule: every gamma must lie in (0, 1)");
  }
  Schedule s;
  s.kind_ = ScheduleKind::Linear;
  s.steps_ = static_cast<int>(gammas.size());
  s.beta1_ = gammas.front();
  s.betaT_ = gammas.back();
  s.gamma_ = std::move(gammas);
  s.fill_derived();
  return s;
}

void Schedule::fill_derived() {
  const std::size_t n = gamma_.size();
  delta_.resize(n);
  delta_bar_.assign(n + 1, 1.0);
  post_var_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    delta_[i] = 1.0 - gamma_[i];
    delta_bar_[i + 1] = delta_bar_[i] * delta_[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    post_var_[i] = gamma_[i] * (1.0 - delta_bar_[i]) / (1.0 - delta_bar_[i + 1]);
  }
}

void Schedule::check_t(int t, const char* op) const {
  if (t < 1 || t > steps_) {
    throw UsageError(std::string(op) + ": timestep " + std::to_string(t) + " outside 1.." +
                     std::to_string(steps_));
  }
}

double Schedule::gamma(int t) const {
  check_t(t, "gamma");
  return gamma_[static_cast<std::size_t>(t - 1)];
}

double Schedule::delta(int t) const {
  check_t(t, "delta");
  return delta_[static_cast<std::size_t>(t - 1)];
}

double Schedule::delta_bar(int t) const {
  if (t < 0 || t > steps_) throw UsageError("delta_bar: timestep out of range");
  return delta_bar_[static_cast<std::size_t>(t)];
}

double Schedule::posterior_var(int t) const {
  check_t(t, "posterior_var");
  return post_var_[static_cast<std::size_t>(t - 1)];
}

PosteriorCoeffs Schedule::posterior_coeffs(int t) const {
  check_t(t, "posterior_coeffs");
  const auto i = static_cast<std::size_t>(t);
  const double bar_prev = delta_bar_[i - 1];
  const double bar = delta_bar_[i];
  const double g = gamma_[i - 1];
  // 1 - db_1 is gamma_1 exactly; computing it by subtraction loses bits.
  const double denom = t == 1 ? g : 1.0 - bar;
  PosteriorCoeffs c;
  c.lambda0 = g * std::sqrt(bar_prev) / denom;
  c.lambda1 = std::sqrt(delta_[i - 1]) * (1.0 - bar_prev) / denom;
  c.lambda2 = 1.0 - c.lambda0 - c.lambda1;
  c.var = post_var_[i - 1];
  return c;
}

MarginalParams Schedule::forward_marginal_params(int t) const {
  check_t(t, "forward_marginal_params");
  const double bar = delta_bar_[static_cast<std::size_t>(t)];
  const double root = std::sqrt(bar);
  return {root, 1.0 - root, 1.0 - bar};
}

}  // namespace diffcls

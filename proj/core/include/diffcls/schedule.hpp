#pragma once

#include <string>
#include <vector>

namespace diffcls {

enum class ScheduleKind { Linear, Cosine };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

inline constexpr double kDefaultBeta1 = 1e-4;
inline constexpr double kDefaultBetaT = 0.02;
inline constexpr double kDefaultCosineOffset = 0.008;
inline constexpr double kCosineMaxNoise = 0.999;
inline constexpr double kCosineMinNoise = 1e-8;

/// Posterior q(z_{t-1} | z_t, z_0, g) = N(l0 z_0 + l1 z_t + l2 g, var I).
struct PosteriorCoeffs {
  double lambda0 = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double var = 0.0;
};

/// q(z_t | z_0, g) = N(coeff_z0 z_0 + coeff_g g, variance I).
struct MarginalParams {
  double coeff_z0 = 0.0;
  double coeff_g = 0.0;
  double variance = 0.0;
};

/// Precomputed per-timestep noise quantities, indexed by t = 1..T.
///
/// gamma(t) is the single-step noise variance, delta(t) = 1 - gamma(t) the
/// signal retention, delta_bar(t) the running product with delta_bar(0) = 1,
/// and posterior_var(t) = gamma(t) (1 - delta_bar(t-1)) / (1 - delta_bar(t)).
class Schedule {
 public:
  /// gamma_t rises linearly from beta1 at t = 1 to betaT at t = T.
  static Schedule linear(int steps, double beta1 = kDefaultBeta1, double betaT = kDefaultBetaT);
  /// delta_bar follows cos^2(((t/T + s) / (1 + s)) pi/2), normalized at t = 0.
  /// gamma is clipped to [1e-8, 0.999] and everything else is recomputed from it.
  static Schedule cosine(int steps, double offset = kDefaultCosineOffset);
  /// Builds a schedule from explicit per-step noise variances gamma_1..gamma_T.
  static Schedule from_gammas(std::vector<double> gammas);

  ScheduleKind kind() const { return kind_; }
  int steps() const { return steps_; }
  double beta1() const { return beta1_; }
  double betaT() const { return betaT_; }
  double offset() const { return offset_; }

  double gamma(int t) const;
  double delta(int t) const;
  double delta_bar(int t) const;  // valid for t = 0..T
  double posterior_var(int t) const;

  const std::vector<double>& gammas() const { return gamma_; }

  PosteriorCoeffs posterior_coeffs(int t) const;
  MarginalParams forward_marginal_params(int t) const;

 private:
  Schedule() = default;
  void fill_derived();
  void check_t(int t, const char* op) const;

  ScheduleKind kind_ = ScheduleKind::Linear;
  int steps_ = 0;
  double beta1_ = 0.0;
  double betaT_ = 0.0;
  double offset_ = 0.0;
  std::vector<double> gamma_;      // [T], gamma_[t-1]
  std::vector<double> delta_;      // [T]
  std::vector<double> delta_bar_;  // [T+1], delta_bar_[0] = 1
  std::vector<double> post_var_;   // [T]
};

}  // namespace diffcls

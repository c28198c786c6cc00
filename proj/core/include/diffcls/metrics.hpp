#pragma once

#include <span>
#include <string>
#include <vector>

namespace diffcls {

/// Classification metrics in the column order accuracy, precision, recall,
/// F1, cross-entropy, MSE. Precision/recall/F1 are for `positive_class`; the
/// macro-averaged variants are kept alongside.
struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double cross_entropy = 0.0;
  double mse = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::size_t samples = 0;
  std::size_t positive_class = 1;
  /// Set when a precision/recall/F1 denominator was zero and the metric was defined as 0.
  bool zero_division = false;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// `probs` is row-major N x C with rows on the simplex.
MetricsReport compute_metrics(std::span<const std::size_t> preds, std::span<const double> probs,
                              std::span<const std::size_t> labels, std::size_t classes,
                              std::size_t positive_class = 1);

/// "97.32,99.40,97.30,98.10,0.3525,0.0644": rates as percentages with two
/// decimals, losses with four.
std::string format_report(const MetricsReport& r);
std::string format_percent(double fraction);
std::string format_loss(double value);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& r);
/// Pretty-printed JSON object with every field plus the formatted row.
std::string to_json(const MetricsReport& r);

}  // namespace diffcls

#include "diffcls/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "diffcls/error.hpp"
#include "json.hpp"

namespace diffcls {

namespace {

struct Rates {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool zero_division = false;
};

Rates class_rates(std::size_t tp, std::size_t fp, std::size_t fn) {
  Rates r;
  if (tp + fp > 0) {
    r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  } else {
    r.zero_division = true;
  }
  if (tp + fn > 0) {
    r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  } else {
    r.zero_division = true;
  }
  if (r.precision + r.recall > 0.0) {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  } else {
    r.zero_division = true;
  }
  return r;
}

}  // namespace

MetricsReport compute_metrics(std::span<const std::size_t> preds, std::span<const double> probs,
                              std::span<const std::size_t> labels, std::size_t classes,
                              std::size_t positive_class) {
  const std::size_t n = labels.size();
  if (n == 0) throw UsageError("metrics: empty input");
  if (preds.size() != n || probs.size() != n * classes) {
    throw UsageError("metrics: predictions, probabilities and labels disagree in size");
  }
  if (positive_class >= classes) throw UsageError("metrics: positive class out of range");

  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  std::size_t hits = 0;
  double ce = 0.0, se = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i], p = preds[i];
    if (y >= classes || p >= classes) throw UsageError("metrics: class index out of range");
    if (p == y) {
      ++hits;
      ++tp[y];
    } else {
      ++fp[p];
      ++fn[y];
    }
    ce -= std::log(std::max(probs[i * classes + y], kProbabilityFloor));
    for (std::size_t c = 0; c < classes; ++c) {
      const double d = probs[i * classes + c] - (c == y ? 1.0 : 0.0);
      se += d * d;
    }
  }

  MetricsReport r;
  r.samples = n;
  r.positive_class = positive_class;
  r.accuracy = static_cast<double>(hits) / static_cast<double>(n);
  r.cross_entropy = ce / static_cast<double>(n);
  r.mse = se / static_cast<double>(n * classes);
  const Rates pos = class_rates(tp[positive_class], fp[positive_class], fn[positive_class]);
  r.precision = pos.precision;
  r.recall = pos.recall;
  r.f1 = pos.f1;
  r.zero_division = pos.zero_division;
  for (std::size_t c = 0; c < classes; ++c) {
    const Rates rc = class_rates(tp[c], fp[c], fn[c]);
    r.macro_precision += rc.precision / static_cast<double>(classes);
    r.macro_recall += rc.recall / static_cast<double>(classes);
    r.macro_f1 += rc.f1 / static_cast<double>(classes);
  }
  return r;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * fraction);
  return buf;
}

std::string format_loss(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", value);
  return buf;
}

std::string format_report(const MetricsReport& r) {
  return format_percent(r.accuracy) + "," + format_percent(r.precision) + "," +
         format_percent(r.recall) + "," + format_percent(r.f1) + "," +
         format_loss(r.cross_entropy) + "," + format_loss(r.mse);
}

std::string metrics_csv_header() {
  return "accuracy,precision,recall,f1,cross_entropy,mse,macro_precision,macro_recall,macro_f1,"
         "samples,zero_division";
}

std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << r.accuracy << ',' << r.precision << ',' << r.recall << ',' << r.f1 << ','
     << r.cross_entropy << ',' << r.mse << ',' << r.macro_precision << ',' << r.macro_recall
     << ',' << r.macro_f1 << ',' << r.samples << ',' << (r.zero_division ? 1 : 0);
  return os.str();
}

std::string to_json(const MetricsReport& r) {
  const nlohmann::json j = {
      {"accuracy", r.accuracy},
      {"precision", r.precision},
      {"recall", r.recall},
      {"f1", r.f1},
      {"cross_entropy", r.cross_entropy},
      {"mse", r.mse},
      {"macro_precision", r.macro_precision},
      {"macro_recall", r.macro_recall},
      {"macro_f1", r.macro_f1},
      {"samples", r.samples},
      {"positive_class", r.positive_class},
      {"zero_division", r.zero_division},
      {"formatted", format_report(r)},
  };
  return j.dump(2);
}

}  // namespace diffcls

#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "onda/error.hpp"

namespace onda {

/// Rows are ground truth, columns predictions.
using Confusion = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>;

inline Confusion make_confusion(int num_classes) { return Confusion::Zero(num_classes, num_classes); }

inline void accumulate(Confusion& cm, std::span<const int> truth, std::span<const int> pred) {
  if (truth.size() != pred.size()) throw ShapeError("confusion: label count mismatch", 0);
  const int c = static_cast<int>(cm.rows());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= c || pred[i] < 0 || pred[i] >= c) throw ConfigError("confusion: class id out of range");
    ++cm(truth[i], pred[i]);
  }
}

struct IoUResult {
  std::vector<double> per_class;  // NaN for classes absent from truth and prediction
  double miou = 0.0;
};

inline IoUResult miou(const Confusion& cm) {
  if (cm.size() == 0 || cm.sum() == 0) throw ConfigError("miou: empty confusion matrix");
  IoUResult r;
  double acc = 0.0;
  int counted = 0;
  for (Eigen::Index c = 0; c < cm.rows(); ++c) {
    const double tp = static_cast<double>(cm(c, c));
    const double fn = static_cast<double>(cm.row(c).sum()) - tp;
    const double fp = static_cast<double>(cm.col(c).sum()) - tp;
    const double denom = tp + fp + fn;
    if (denom == 0.0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    r.per_class.push_back(tp / denom);
    acc += tp / denom;
    ++counted;
  }
  r.miou = acc / counted;
  return r;
}

struct HMean {
  double value = 0.0;
  bool had_zero = false;
};

/// n / sum(1/v); 0 with had_zero set when any value is zero.
template <typename Scalar>
HMean hmean(std::span<const Scalar> values) {
  if (values.empty()) throw ConfigError("hmean: no values");
  Scalar inv = 0;
  for (Scalar v : values) {
    if (v < 0) throw ConfigError("hmean: negative value");
    if (v == 0) return {0.0, true};
    inv += Scalar(1) / v;
  }
  return {static_cast<double>(Scalar(values.size()) / inv), false};
}

inline HMean hmean(const std::vector<double>& values) { return hmean(std::span<const double>(values)); }

}  // namespace onda

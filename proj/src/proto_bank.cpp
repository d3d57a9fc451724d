#include "onda/proto_bank.hpp"

#include <cmath>
#include <string>

namespace onda {

namespace {

void check_features(const Tensor& features, Index k, std::size_t labels, const char* what) {
  if (features.rank() != 4) throw ShapeError(std::string(what) + ": features must be NCHW", -1);
  if (features.dim(1) != k) {
    throw ShapeError(std::string(what) + ": feature dimension " + std::to_string(features.dim(1)) +
                         " does not match " + std::to_string(k),
                     1);
  }
  const std::size_t pixels = static_cast<std::size_t>(features.dim(0) * features.dim(2) * features.dim(3));
  if (labels != pixels && labels != 0) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels) + " labels for " +
                         std::to_string(pixels) + " pixels",
                     0);
  }
}

}  // namespace

PrototypeAccumulator::PrototypeAccumulator(Index num_classes, Index feature_dim)
    : class_sum_(Eigen::MatrixXd::Zero(num_classes, feature_dim)),
      class_count_(static_cast<std::size_t>(num_classes), 0),
      sum_(Eigen::VectorXd::Zero(feature_dim)),
      sum_sq_(Eigen::VectorXd::Zero(feature_dim)) {}

void PrototypeAccumulator::add(const Tensor& features, std::span<const int> labels) {
  const Index k = class_sum_.cols();
  check_features(features, k, labels.size(), "PrototypeAccumulator::add");
  if (labels.empty()) throw ShapeError("PrototypeAccumulator::add: labels missing", 0);
  const Index hw = features.dim(2) * features.dim(3);
  for (Index s = 0; s < features.dim(0); ++s) {
    const auto f = features.plane(s);  // [K, HW]
    sum_ += f.rowwise().sum();
    sum_sq_ += f.array().square().rowwise().sum().matrix();
    for (Index j = 0; j < hw; ++j) {
      const int c = labels[static_cast<std::size_t>(s * hw + j)];
      if (c < 0 || c >= class_sum_.rows()) throw ConfigError("label " + std::to_string(c) + " out of range");
      class_sum_.row(c) += f.col(j).transpose();
      ++class_count_[static_cast<std::size_t>(c)];
    }
  }
  total_ += features.dim(0) * hw;
}

PrototypeBank PrototypeAccumulator::finish(double lambda, const PrototypeBank* fallback) const {
  if (total_ == 0) throw ConfigError("prototype initialization: no pixels accumulated");
  PrototypeBank bank;
  bank.lambda = lambda;
  bank.eta.resize(class_sum_.rows(), class_sum_.cols());
  bank.class_seen.assign(static_cast<std::size_t>(class_sum_.rows()), true);
  for (Index c = 0; c < class_sum_.rows(); ++c) {
    const Index count = class_count_[static_cast<std::size_t>(c)];
    if (count == 0 && fallback != nullptr) {
      bank.eta.row(c) = fallback->eta.row(c);
      bank.class_seen[static_cast<std::size_t>(c)] = false;
      continue;
    }
    if (count == 0) throw ConfigError("prototype initialization: class " + std::to_string(c) + " has no pixels");
    bank.eta.row(c) = class_sum_.row(c) / static_cast<double>(count);
  }
  const double inv = 1.0 / static_cast<double>(total_);
  const Eigen::VectorXd mean = sum_ * inv;
  bank.sigma2 = (sum_sq_ * inv - mean.cwiseAbs2()).cwiseMax(PrototypeBank::kVarianceFloor);
  return bank;
}

Tensor proto_predict(const PrototypeBank& bank, const Tensor& features) {
  const Index k = bank.feature_dim(), c = bank.num_classes();
  check_features(features, k, 0, "proto_predict");
  const Index n = features.dim(0), hw = features.dim(2) * features.dim(3);
  const Eigen::ArrayXd inv_sigma = bank.sigma2.array().rsqrt();
  Tensor omega(Shape{n, c, features.dim(2), features.dim(3)});
  Eigen::ArrayXXd dist(c, hw);
  for (Index s = 0; s < n; ++s) {
    const auto f = features.plane(s).array();  // [K, HW]
    for (Index cls = 0; cls < c; ++cls) {
      const auto scaled = (f.colwise() - bank.eta.row(cls).transpose().array()).colwise() * inv_sigma;
      if (bank.norm == ProtoNorm::L2) {
        dist.row(cls) = scaled.square().colwise().sum().sqrt();
      } else {
        dist.row(cls) = scaled.abs().colwise().sum();
      }
    }
    // softmax of -dist: shift by the minimum distance
    auto out = omega.plane(s).array();
    const Eigen::ArrayXXd shifted = -(dist.rowwise() - dist.colwise().minCoeff());
    out = shifted.exp();
    out.rowwise() /= out.colwise().sum();
  }
  return omega;
}

void update_prototypes(PrototypeBank& bank, const Tensor& features, std::span<const int> predictions) {
  const Index k = bank.feature_dim(), c = bank.num_classes();
  check_features(features, k, predictions.size(), "update_prototypes");
  const Index hw = features.dim(2) * features.dim(3);
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(c, k);
  std::vector<Index> counts(static_cast<std::size_t>(c), 0);
  for (Index s = 0; s < features.dim(0); ++s) {
    const auto f = features.plane(s);
    for (Index j = 0; j < hw; ++j) {
      const int cls = predictions[static_cast<std::size_t>(s * hw + j)];
      if (cls < 0 || cls >= c) throw ConfigError("prediction " + std::to_string(cls) + " out of range");
      sums.row(cls) += f.col(j).transpose();
      ++counts[static_cast<std::size_t>(cls)];
    }
  }
  for (Index cls = 0; cls < c; ++cls) {
    const Index count = counts[static_cast<std::size_t>(cls)];
    if (count == 0) continue;
    const Eigen::RowVectorXd batch_mean = sums.row(cls) / static_cast<double>(count);
    bank.eta.row(cls) = bank.lambda * bank.eta.row(cls) + (1.0 - bank.lambda) * batch_mean;
    bank.class_seen[static_cast<std::size_t>(cls)] = true;
  }
}

void update_prototype_variance(PrototypeBank& bank, const Tensor& features) {
  PrototypeAccumulator acc(1, bank.feature_dim());
  const std::vector<int> zeros(static_cast<std::size_t>(features.dim(0) * features.dim(2) * features.dim(3)), 0);
  acc.add(features, zeros);
  const PrototypeBank batch = acc.finish(bank.lambda);
  bank.sigma2 = (bank.lambda * bank.sigma2 + (1.0 - bank.lambda) * batch.sigma2).cwiseMax(PrototypeBank::kVarianceFloor);
}

}  // namespace onda

#pragma once

#include <span>
#include <vector>

#include "onda/tensor.hpp"

namespace onda {

enum class ProtoNorm { L2, L1 };

/// Per-class feature centroids with a shared per-dimension variance.
struct PrototypeBank {
  Eigen::MatrixXd eta;       // [C, K], row c is the centroid of class c
  Eigen::VectorXd sigma2;    // [K], floored at kVarianceFloor
  std::vector<bool> class_seen;
  double lambda = 0.99;
  ProtoNorm norm = ProtoNorm::L2;

  static constexpr double kVarianceFloor = 1e-6;

  Index num_classes() const { return eta.rows(); }
  Index feature_dim() const { return eta.cols(); }
};

/// Streaming accumulator for prototype initialization: class-conditional
/// feature sums plus the global first and second moments over every pixel.
class PrototypeAccumulator {
 public:
  PrototypeAccumulator(Index num_classes, Index feature_dim);

  /// features [N,K,H,W]; labels has N*H*W entries in (n, h, w) order.
  void add(const Tensor& features, std::span<const int> labels);

  /// Centroids are the class means; sigma2 = E[f^2] - E[f]^2 over all pixels.
  /// A class without pixels takes its centroid from `fallback` and is marked
  /// unseen; without a fallback it is a ConfigError.
  PrototypeBank finish(double lambda, const PrototypeBank* fallback = nullptr) const;

  Index pixel_count() const { return total_; }

 private:
  Eigen::MatrixXd class_sum_;
  std::vector<Index> class_count_;
  Eigen::VectorXd sum_;
  Eigen::VectorXd sum_sq_;
  Index total_ = 0;
};

/// omega_c = softmax_c(-|| (f - eta_c) / sigma ||) per pixel: [N,K,H,W] -> [N,C,H,W].
Tensor proto_predict(const PrototypeBank& bank, const Tensor& features);

/// Blends batch centroids of the pixels predicted as each class into the
/// bank: eta_c <- lambda * eta_c + (1 - lambda) * batch_mean_c for every class
/// with at least one predicted pixel.
void update_prototypes(PrototypeBank& bank, const Tensor& features, std::span<const int> predictions);

/// Re-estimates sigma2 from a batch as an EMA with the bank's lambda. Off by
/// default in the adaptation loop; exposed for the online-variance ablation.
void update_prototype_variance(PrototypeBank& bank, const Tensor& features);

}  // namespace onda

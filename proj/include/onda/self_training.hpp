#pragma once

#include <span>
#include <vector>

#include "onda/autodiff.hpp"
#include "onda/proto_bank.hpp"
#include "onda/segnet.hpp"

namespace onda {

struct Hyperparams {
  double alpha = 0.1;   // SCE forward weight
  double beta = 1.0;    // SCE reverse weight
  double gamma = 0.1;   // confidence regularizer weight
  double lr_online = 1e-3;
  Index batch_target = 4;
  Index batch_replay = 4;
  double ema_momentum = 0.99;
  double proto_lambda = 0.99;
  double prob_floor = 1e-8;
  double reverse_label_floor = 1e-4;
  bool update_proto_variance = false;

  void validate() const;
};

/// Labeled images with per-pixel class ids in (n, h, w) order.
struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;
};

/// p_hat = delta * static + (1 - delta) * dynamic, pixelwise.
Tensor prior_blend(const Tensor& static_probs, const Tensor& dynamic_probs, double delta);

/// Hard labels argmax_c(p_hat_c * omega_c); ties go to the lowest class.
std::vector<int> rectify(const Tensor& p_hat, const Tensor& omega);

/// One-hot encoding [N,C,H,W] of per-pixel labels.
Tensor one_hot(std::span<const int> labels, const Shape& probs_shape);

// Losses on graph nodes. `probs` is a softmax output [N,C,H,W]; all losses
// are averaged over pixels.

/// -gamma * mean_pixels (1/C) sum_c log p_c
Var loss_reg(Var probs, double gamma, double prob_floor = 1e-8);
/// alpha * CE(p, y) + beta * CE(y, p) with the one-hot zeros of y clamped to
/// `label_floor` inside the reverse term.
Var loss_pseudo(Var probs, std::span<const int> y_hat, double alpha, double beta, double prob_floor = 1e-8,
                double label_floor = 1e-4);
/// Cross-entropy against ground-truth labels; throws ConfigError on ids >= C.
Var loss_task(Var probs, std::span<const int> labels, double prob_floor = 1e-8);
/// Mean per-pixel prediction entropy.
Var loss_entropy(Var probs, double prob_floor = 1e-8);

/// Everything the online loop mutates or reads, one value per role.
struct AdaptState {
  ModelCheckpoint live;
  ModelCheckpoint momentum;
  ModelCheckpoint static_model;
  ModelCheckpoint dynamic;
  PrototypeBank bank;

  /// live = momentum = dynamic = static copy, with roles set.
  static AdaptState from_static(const ModelCheckpoint& static_model, const PrototypeBank& bank);
};

struct StepReport {
  long step = 0;
  int domain_truth = -1;  // schedule level of the batch, -1 outside a stream
  double z = 0.0;
  double mu = 0.0;
  int indicator = 0;
  double delta = 1.0;
  double loss_task = 0.0;
  double loss_pseudo = 0.0;
  double loss_reg = 0.0;
};

/// Mean over pixels of the per-pixel maximum class probability.
double batch_confidence(const Tensor& probs);

/// One online adaptation step on a target batch.
///
/// Pseudo-labels come from the static/dynamic prior blended with `delta` and
/// rectified by the prototype prediction of the momentum encoder. The live
/// model is trained on pseudo-labels (batch-norm statistics updated) and on
/// the replay batch (statistics frozen) with a single SGD step; then the
/// momentum model and the prototypes follow. `replay` may be null (empty
/// buffer). `static_probs` may carry a precomputed static-model prediction of
/// the same batch. z in the report is the static confidence; mu and
/// indicator are left for the caller.
StepReport adapt_step(AdaptState& state, const Tensor& target, const LabeledBatch* replay, double delta,
                      const Hyperparams& hp, const Tensor* static_probs = nullptr);

}  // namespace onda

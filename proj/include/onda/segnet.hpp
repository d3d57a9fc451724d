#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "onda/autodiff.hpp"

namespace onda {

struct ArchConfig {
  Index in_channels = 3;
  Index hidden_channels = 16;
  Index feature_dim = 16;  // K
  Index num_classes = 5;   // C
  Index height = 48;
  Index width = 64;
  Index kernel_size = 3;

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

enum class ModelRole : std::uint8_t { Live = 0, Momentum = 1, Static = 2, Dynamic = 3 };

std::string to_string(ModelRole role);

/// conv -> batch-norm -> relu.
struct ConvBlock {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout]
  Tensor gamma;   // [Cout]
  Tensor beta;    // [Cout]
  BNState bn;
};

/// Parameters and batch-norm statistics of the segmentation network
/// h = g o f: three conv blocks form the encoder f, a 1x1 convolution is the
/// classifier g.
struct ModelCheckpoint {
  ArchConfig arch;
  ModelRole role = ModelRole::Live;
  std::array<ConvBlock, 3> blocks;
  Tensor cls_weight;  // [C, K, 1, 1]
  Tensor cls_bias;    // [C]

  /// Learnable tensors in declaration order (the checkpoint file order).
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  /// Batch-norm affine tensors only.
  std::vector<Tensor*> bn_affine_parameters();

  void set_requires_grad(bool on);
  /// Same architecture, parameters and running statistics (role ignored).
  bool same_state(const ModelCheckpoint& other) const;
};

ModelCheckpoint init_model(const ArchConfig& cfg, std::uint64_t seed);

/// Graph-level outputs of one forward pass.
struct ForwardVars {
  Var features;  // [N, K, H, W]
  Var logits;    // [N, C, H, W]
  Var probs;     // [N, C, H, W]
};

/// Forward pass recorded on `graph`. Parameters are bound to `model`, so
/// gradients reach the model tensors that have requires_grad set. In
/// TrainUpdate the running statistics of `model` are updated.
ForwardVars forward(Graph& graph, ModelCheckpoint& model, const Tensor& batch, BNMode mode);

struct Prediction {
  Tensor features;
  Tensor probs;
};

/// Inference without gradients; TrainUpdate is rejected.
Prediction forward(const ModelCheckpoint& model, const Tensor& batch, BNMode mode = BNMode::Eval);

/// Per-pixel argmax over classes: [N,C,H,W] -> N*H*W labels (row-major).
std::vector<int> argmax_labels(const Tensor& probs);

/// theta_m <- m * theta_m + (1 - m) * theta for every parameter; batch-norm
/// running statistics are copied from `live`.
void ema_update(ModelCheckpoint& momentum, const ModelCheckpoint& live, double m);

/// Replaces `dynamic` by a copy of `live`, keeping the Dynamic role.
void promote_dynamic(ModelCheckpoint& dynamic, const ModelCheckpoint& live);

}  // namespace onda

#include "onda/segnet.hpp"

#include <cmath>
#include <random>

namespace onda {

void ArchConfig::validate() const {
  if (feature_dim <= 0) throw ConfigError("feature_dim must be positive");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (in_channels <= 0 || hidden_channels <= 0) throw ConfigError("channel counts must be positive");
  if (height <= 0 || width <= 0) throw ConfigError("image size must be positive");
  if (kernel_size <= 0 || kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
}

std::string to_string(ModelRole role) {
  switch (role) {
    case ModelRole::Live: return "live";
    case ModelRole::Momentum: return "momentum";
    case ModelRole::Static: return "static";
    case ModelRole::Dynamic: return "dynamic";
  }
  return "unknown";
}

std::vector<Tensor*> ModelCheckpoint::parameters() {
  std::vector<Tensor*> out;
  for (ConvBlock& b : blocks) {
    out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
  }
  out.insert(out.end(), {&cls_weight, &cls_bias});
  return out;
}

std::vector<const Tensor*> ModelCheckpoint::parameters() const {
  std::vector<const Tensor*> out;
  for (const ConvBlock& b : blocks) {
    out.insert(out.end(), {&b.weight, &b.bias, &b.gamma, &b.beta});
  }
  out.insert(out.end(), {&cls_weight, &cls_bias});
  return out;
}

std::vector<Tensor*> ModelCheckpoint::bn_affine_parameters() {
  std::vector<Tensor*> out;
  for (ConvBlock& b : blocks) out.insert(out.end(), {&b.gamma, &b.beta});
  return out;
}

void ModelCheckpoint::set_requires_grad(bool on) {
  for (Tensor* p : parameters()) p->set_requires_grad(on);
}

bool ModelCheckpoint::same_state(const ModelCheckpoint& other) const {
  if (!(arch == other.arch)) return false;
  const auto a = parameters();
  const auto b = other.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i]->same_values(*b[i])) return false;
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (!(blocks[i].bn == other.blocks[i].bn)) return false;
  }
  return true;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

}  // namespace

ModelCheckpoint init_model(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelCheckpoint model;
  model.arch = cfg;
  const std::array<Index, 4> channels{cfg.in_channels, cfg.hidden_channels, cfg.hidden_channels,
                                      cfg.feature_dim};
  const Index k = cfg.kernel_size;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const Index cin = channels[i], cout = channels[i + 1];
    const double fan_in = static_cast<double>(cin * k * k);
    ConvBlock& b = model.blocks[i];
    b.weight = uniform_tensor({cout, cin, k, k}, std::sqrt(6.0 / fan_in), rng);
    b.bias = uniform_tensor({cout}, 1.0 / std::sqrt(fan_in), rng);
    b.gamma = Tensor({cout}, 1.0);
    b.beta = Tensor({cout}, 0.0);
    b.bn = BNState(cout);
  }
  const double fan_in = static_cast<double>(cfg.feature_dim);
  model.cls_weight = uniform_tensor({cfg.num_classes, cfg.feature_dim, 1, 1}, 1.0 / std::sqrt(fan_in), rng);
  model.cls_bias = uniform_tensor({cfg.num_classes}, 1.0 / std::sqrt(fan_in), rng);
  return model;
}

ForwardVars forward(Graph& graph, ModelCheckpoint& model, const Tensor& batch, BNMode mode) {
  const ArchConfig& a = model.arch;
  expect_shape(batch.shape(), {-1, a.in_channels, a.height, a.width}, "segnet input");
  const int pad = static_cast<int>((a.kernel_size - 1) / 2);
  Var x = graph.constant(batch);
  for (ConvBlock& b : model.blocks) {
    x = ops::conv2d(x, graph.parameter(b.weight), graph.parameter(b.bias), pad);
    x = ops::batchnorm2d(x, graph.parameter(b.gamma), graph.parameter(b.beta), b.bn, mode);
    x = ops::relu(x);
  }
  Var logits = ops::conv2d(x, graph.parameter(model.cls_weight), graph.parameter(model.cls_bias), 0);
  return ForwardVars{x, logits, ops::softmax_channel(logits)};
}

Prediction forward(const ModelCheckpoint& model, const Tensor& batch, BNMode mode) {
  if (mode == BNMode::TrainUpdate) throw ConfigError("forward: TrainUpdate requires a mutable model");
  ModelCheckpoint frozen = model;
  frozen.set_requires_grad(false);
  Graph graph;
  const ForwardVars out = forward(graph, frozen, batch, mode);
  return Prediction{out.features.value(), out.probs.value()};
}

std::vector<int> argmax_labels(const Tensor& probs) {
  const Index n = probs.dim(0), c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  std::vector<int> labels(static_cast<std::size_t>(n * hw));
  for (Index s = 0; s < n; ++s) {
    const auto p = probs.plane(s);
    for (Index j = 0; j < hw; ++j) {
      Index best = 0;
      for (Index k = 1; k < c; ++k) {
        if (p(k, j) > p(best, j)) best = k;
      }
      labels[static_cast<std::size_t>(s * hw + j)] = static_cast<int>(best);
    }
  }
  return labels;
}

void ema_update(ModelCheckpoint& momentum, const ModelCheckpoint& live, double m) {
  if (!(m >= 0.0 && m < 1.0)) throw ConfigError("ema_update: momentum must lie in [0, 1)");
  if (!(momentum.arch == live.arch)) throw ConfigError("ema_update: architectures differ");
  auto dst = momentum.parameters();
  const auto src = live.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i]->data() = m * dst[i]->data() + (1.0 - m) * src[i]->data();
  }
  for (std::size_t i = 0; i < momentum.blocks.size(); ++i) momentum.blocks[i].bn = live.blocks[i].bn;
}

void promote_dynamic(ModelCheckpoint& dynamic, const ModelCheckpoint& live) {
  dynamic = live;
  dynamic.role = ModelRole::Dynamic;
  dynamic.set_requires_grad(false);
  for (Tensor* p : dynamic.parameters()) p->clear_grad();
}

}  // namespace onda

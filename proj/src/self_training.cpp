#include "onda/self_training.hpp"

#include <cmath>
#include <string>

namespace onda {

void Hyperparams::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("alpha, beta, gamma must be non-negative");
  if (lr_online < 0) throw ConfigError("lr_online must be non-negative");
  if (batch_target <= 0 || batch_replay < 0) throw ConfigError("invalid batch sizes");
  if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ConfigError("ema_momentum must lie in [0, 1)");
  if (!(proto_lambda >= 0 && proto_lambda <= 1)) throw ConfigError("proto_lambda must lie in [0, 1]");
}

Tensor prior_blend(const Tensor& static_probs, const Tensor& dynamic_probs, double delta) {
  if (!(delta >= 0.0 && delta <= 1.0)) throw ConfigError("prior_blend: delta " + std::to_string(delta) + " outside [0, 1]");
  expect_shape(dynamic_probs.shape(), static_probs.shape(), "prior_blend");
  if (delta == 1.0) return static_probs;
  if (delta == 0.0) return dynamic_probs;
  return Tensor(static_probs.shape(), delta * static_probs.data() + (1.0 - delta) * dynamic_probs.data());
}

std::vector<int> rectify(const Tensor& p_hat, const Tensor& omega) {
  expect_shape(omega.shape(), p_hat.shape(), "rectify");
  return argmax_labels(Tensor(p_hat.shape(), p_hat.data() * omega.data()));
}

Tensor one_hot(std::span<const int> labels, const Shape& probs_shape) {
  const Index n = probs_shape.at(0), c = probs_shape.at(1), hw = probs_shape.at(2) * probs_shape.at(3);
  if (static_cast<Index>(labels.size()) != n * hw) {
    throw ShapeError("one_hot: " + std::to_string(labels.size()) + " labels for " + std::to_string(n * hw) + " pixels", 0);
  }
  Tensor out(probs_shape, 0.0);
  for (Index s = 0; s < n; ++s) {
    for (Index j = 0; j < hw; ++j) {
      const int y = labels[static_cast<std::size_t>(s * hw + j)];
      if (y < 0 || y >= c) throw ConfigError("label id " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
      out[(s * c + y) * hw + j] = 1.0;
    }
  }
  return out;
}

namespace {

double pixel_count(const Var& probs) {
  const Shape& s = probs.shape();
  return static_cast<double>(s[0] * s[2] * s[3]);
}

}  // namespace

Var loss_reg(Var probs, double gamma, double prob_floor) {
  return ops::scale(ops::mean(ops::log(probs, prob_floor)), -gamma);
}

Var loss_pseudo(Var probs, std::span<const int> y_hat, double alpha, double beta, double prob_floor,
                double label_floor) {
  Graph& g = *probs.graph;
  const Tensor hot = one_hot(y_hat, probs.shape());
  const double inv_pixels = 1.0 / pixel_count(probs);
  // forward CE: -sum_c y_c log p_c
  Var forward = ops::sum(ops::mul(g.constant(hot), ops::log(probs, prob_floor)));
  // reverse CE: -sum_c p_c log max(y_c, floor)
  Tensor log_label(hot.shape(), hot.data().max(label_floor).log());
  Var reverse = ops::sum(ops::mul(probs, g.constant(std::move(log_label))));
  return ops::add(ops::scale(forward, -alpha * inv_pixels), ops::scale(reverse, -beta * inv_pixels));
}

Var loss_task(Var probs, std::span<const int> labels, double prob_floor) {
  Graph& g = *probs.graph;
  Var picked = ops::sum(ops::mul(g.constant(one_hot(labels, probs.shape())), ops::log(probs, prob_floor)));
  return ops::scale(picked, -1.0 / pixel_count(probs));
}

Var loss_entropy(Var probs, double prob_floor) {
  return ops::scale(ops::sum(ops::mul(probs, ops::log(probs, prob_floor))), -1.0 / pixel_count(probs));
}

AdaptState AdaptState::from_static(const ModelCheckpoint& static_model, const PrototypeBank& bank) {
  AdaptState s{static_model, static_model, static_model, static_model, bank};
  s.live.role = ModelRole::Live;
  s.momentum.role = ModelRole::Momentum;
  s.static_model.role = ModelRole::Static;
  s.dynamic.role = ModelRole::Dynamic;
  s.live.set_requires_grad(true);
  s.momentum.set_requires_grad(false);
  s.static_model.set_requires_grad(false);
  s.dynamic.set_requires_grad(false);
  return s;
}

double batch_confidence(const Tensor& probs) {
  if (probs.rank() != 4 || probs.numel() == 0) throw ShapeError("batch_confidence: expected non-empty NCHW probabilities", -1);
  const Index n = probs.dim(0);
  double total = 0.0;
  for (Index s = 0; s < n; ++s) total += probs.plane(s).colwise().maxCoeff().sum();
  return total / static_cast<double>(n * probs.dim(2) * probs.dim(3));
}

StepReport adapt_step(AdaptState& state, const Tensor& target, const LabeledBatch* replay, double delta,
                      const Hyperparams& hp, const Tensor* static_probs) {
  StepReport report;
  report.delta = delta;

  // (1) momentum encoder -> prototype prediction and hard labels
  const Prediction mom = forward(state.momentum, target, BNMode::Eval);
  const Tensor omega = proto_predict(state.bank, mom.features);
  const std::vector<int> mom_labels = argmax_labels(mom.probs);

  // (2) prior from static / dynamic checkpoints
  Tensor static_out = static_probs != nullptr ? *static_probs : forward(state.static_model, target, BNMode::Eval).probs;
  report.z = batch_confidence(static_out);
  Tensor p_hat = delta == 1.0 ? std::move(static_out)
                              : prior_blend(static_out, forward(state.dynamic, target, BNMode::Eval).probs, delta);

  // (3) rectified pseudo-labels
  const std::vector<int> y_hat = rectify(p_hat, omega);

  // (4)-(6) live model, single SGD step
  Graph graph;
  state.live.set_requires_grad(true);
  const ForwardVars tgt = forward(graph, state.live, target, BNMode::TrainUpdate);
  Var l_pseudo = loss_pseudo(tgt.probs, y_hat, hp.alpha, hp.beta, hp.prob_floor, hp.reverse_label_floor);
  Var l_reg = loss_reg(tgt.probs, hp.gamma, hp.prob_floor);
  Var total = ops::add(l_pseudo, l_reg);
  if (replay != nullptr && !replay->labels.empty()) {
    const ForwardVars rb = forward(graph, state.live, replay->images, BNMode::TrainFrozen);
    Var l_task = loss_task(rb.probs, replay->labels, hp.prob_floor);
    report.loss_task = l_task.value().item();
    total = ops::add(l_task, total);
  }
  report.loss_pseudo = l_pseudo.value().item();
  report.loss_reg = l_reg.value().item();
  graph.backward(total);
  const std::vector<Tensor*> params = state.live.parameters();
  sgd_step(params, hp.lr_online);

  // (7) momentum model, (8) prototypes
  ema_update(state.momentum, state.live, hp.ema_momentum);
  update_prototypes(state.bank, mom.features, mom_labels);
  if (hp.update_proto_variance) update_prototype_variance(state.bank, mom.features);
  return report;
}

}  // namespace onda

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "model_fixtures.hpp"
#include "onda/self_training.hpp"

using namespace onda;
using namespace onda::testing;

namespace {

Tensor pixel_probs(std::initializer_list<double> p) {
  Tensor t(Shape{1, static_cast<Index>(p.size()), 1, 1});
  Index i = 0;
  for (double v : p) t[i++] = v;
  return t;
}

Tensor random_simplex(Shape shape, std::mt19937_64& rng) {
  Graph g;
  return ops::softmax_channel(g.constant(random_tensor(std::move(shape), rng, -3.0, 3.0))).value();
}

double scalar_loss(const std::function<Var(Var)>& fn, const Tensor& probs) {
  Graph g;
  return fn(g.constant(probs)).value().item();
}

}  // namespace

TEST(PriorBlend, Endpoints) {
  std::mt19937_64 rng(1);
  const Tensor s = random_simplex({2, 3, 2, 2}, rng), d = random_simplex({2, 3, 2, 2}, rng);
  EXPECT_TRUE(prior_blend(s, d, 1.0).same_values(s));
  EXPECT_TRUE(prior_blend(s, d, 0.0).same_values(d));
}

TEST(PriorBlend, Midpoint) {
  const Tensor p = prior_blend(pixel_probs({1.0, 0.0}), pixel_probs({0.0, 1.0}), 0.5);
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
}

TEST(PriorBlend, PreservesSimplex) {
  std::mt19937_64 rng(2);
  const Tensor s = random_simplex({2, 4, 3, 3}, rng), d = random_simplex({2, 4, 3, 3}, rng);
  for (double delta : {0.1, 0.37, 0.9}) {
    const Tensor p = prior_blend(s, d, delta);
    EXPECT_GE(p.data().minCoeff(), 0.0);
    for (Index n = 0; n < 2; ++n) {
      const Eigen::ArrayXd sums = p.plane(n).colwise().sum().transpose().array();
      EXPECT_LT((sums - 1.0).abs().maxCoeff(), 1e-6);
    }
  }
}

TEST(PriorBlend, DeltaOutOfRange) {
  const Tensor p = pixel_probs({0.5, 0.5});
  EXPECT_THROW(prior_blend(p, p, 1.5), ConfigError);
  EXPECT_THROW(prior_blend(p, p, -0.1), ConfigError);
}

TEST(Rectify, ScalarProductOracle) {
  EXPECT_EQ(rectify(pixel_probs({0.6, 0.4}), pixel_probs({0.3, 0.7}))[0], 1);
}

TEST(Rectify, UniformFactorDefersToTheOther) {
  std::mt19937_64 rng(3);
  const Tensor p = random_simplex({2, 5, 3, 3}, rng), w = random_simplex({2, 5, 3, 3}, rng);
  const Tensor uniform(p.shape(), 0.2);
  EXPECT_EQ(rectify(p, uniform), argmax_labels(p));
  EXPECT_EQ(rectify(uniform, w), argmax_labels(w));
}

TEST(Rectify, InvariantToPositivePixelRescaling) {
  std::mt19937_64 rng(4);
  const Tensor p = random_simplex({1, 4, 3, 3}, rng), w = random_simplex({1, 4, 3, 3}, rng);
  Tensor scaled = p;
  std::uniform_real_distribution<double> u(0.1, 10.0);
  for (Index j = 0; j < 9; ++j) {
    const double a = u(rng);
    for (Index c = 0; c < 4; ++c) scaled[c * 9 + j] *= a;
  }
  EXPECT_EQ(rectify(p, w), rectify(scaled, w));
}

TEST(LossReg, UniformAndZeroGamma) {
  const Tensor u(Shape{2, 5, 2, 2}, 0.2);
  EXPECT_NEAR(scalar_loss([](Var p) { return loss_reg(p, 0.1); }, u), 0.1 * std::log(5.0), 1e-12);
  EXPECT_EQ(scalar_loss([](Var p) { return loss_reg(p, 0.0); }, u), 0.0);
}

TEST(LossReg, ScalarOracle) {
  const double v = scalar_loss([](Var p) { return loss_reg(p, 0.1); }, pixel_probs({0.9, 0.1}));
  EXPECT_NEAR(v, 0.12042, 1e-4);
  EXPECT_NEAR(v, -0.1 * (std::log(0.9) + std::log(0.1)) / 2.0, 1e-15);
}

TEST(LossPseudo, ReducesToCrossEntropy) {
  std::mt19937_64 rng(5);
  const Tensor p = random_simplex({2, 3, 2, 2}, rng);
  const std::vector<int> y = random_labels(8, 3, rng);
  const double sce = scalar_loss([&](Var v) { return loss_pseudo(v, y, 1.0, 0.0); }, p);
  const double ce = scalar_loss([&](Var v) { return loss_task(v, y); }, p);
  EXPECT_NEAR(sce, ce, 1e-15);
}

TEST(LossPseudo, OneHotPredictionHasZeroForwardTerm) {
  const std::vector<int> y{1};
  EXPECT_EQ(scalar_loss([&](Var v) { return loss_pseudo(v, y, 1.0, 0.0); }, pixel_probs({0.0, 1.0})), 0.0);
}

TEST(LossPseudo, ScalarOracle) {
  const std::vector<int> y{0};
  const double v = scalar_loss([&](Var p) { return loss_pseudo(p, y, 0.1, 1.0); }, pixel_probs({0.7, 0.3}));
  // forward: -log 0.7; reverse: -(0.7 log 1 + 0.3 log 1e-4)
  EXPECT_NEAR(v, 0.1 * -std::log(0.7) + 1.0 * -(0.3 * std::log(1e-4)), 1e-12);
}

TEST(LossTask, PerfectUniformAndOracle) {
  const std::vector<int> y{1};
  EXPECT_EQ(scalar_loss([&](Var v) { return loss_task(v, y); }, pixel_probs({0.0, 1.0, 0.0})), 0.0);
  EXPECT_NEAR(scalar_loss([&](Var v) { return loss_task(v, y); }, pixel_probs({1 / 3.0, 1 / 3.0, 1 / 3.0})),
              std::log(3.0), 1e-15);
  std::mt19937_64 rng(6);
  const Tensor p = random_simplex({2, 4, 3, 2}, rng);
  const std::vector<int> labels = random_labels(12, 4, rng);
  double want = 0.0;
  for (Index n = 0; n < 2; ++n)
    for (Index j = 0; j < 6; ++j) want -= std::log(p[(n * 4 + labels[static_cast<std::size_t>(n * 6 + j)]) * 6 + j]);
  EXPECT_NEAR(scalar_loss([&](Var v) { return loss_task(v, labels); }, p), want / 12.0, 1e-9);
}

TEST(LossTask, LabelOutOfRange) {
  const std::vector<int> y{3};
  EXPECT_THROW(scalar_loss([&](Var v) { return loss_task(v, y); }, pixel_probs({0.5, 0.5})), ConfigError);
}

TEST(LossEntropy, UniformIsLogC) {
  EXPECT_NEAR(scalar_loss([](Var v) { return loss_entropy(v); }, Tensor(Shape{1, 4, 2, 2}, 0.25)), std::log(4.0),
              1e-15);
}

TEST(LossGradients, FiniteDifferences) {
  std::mt19937_64 rng(7);
  Tensor logits = random_tensor({2, 3, 2, 3}, rng, -2.0, 2.0);
  const std::vector<int> y = random_labels(12, 3, rng);
  auto check = [&](const std::function<Var(Var)>& loss) {
    EXPECT_LT(gradcheck([&](Graph&, const std::vector<Var>& v) { return loss(ops::softmax_channel(v[0])); }, {&logits}),
              1e-6);
  };
  check([&](Var p) { return loss_reg(p, 0.1); });
  check([&](Var p) { return loss_pseudo(p, y, 0.1, 1.0); });
  check([&](Var p) { return loss_task(p, y); });
  check([&](Var p) { return loss_entropy(p); });
}

TEST(LossGradients, TotalLossThroughNetwork) { EXPECT_LT(total_loss_gradcheck(1), 1e-3); }

namespace {

struct StepFixture {
  AdaptState state;
  Tensor target;
  LabeledBatch replay;
};

StepFixture make_step_fixture(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const ArchConfig arch = tiny_arch();
  const ModelCheckpoint stat = init_model(arch, seed);
  PrototypeAccumulator acc(arch.num_classes, arch.feature_dim);
  const Tensor src = random_tensor({4, 3, 8, 8}, rng, 0.0, 1.0);
  std::vector<int> y = random_labels(256, 3, rng);
  acc.add(forward(stat, src).features, y);
  StepFixture f{AdaptState::from_static(stat, acc.finish(0.99)), random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0),
                LabeledBatch{random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0), random_labels(128, 3, rng)}};
  return f;
}

}  // namespace

TEST(AdaptStep, ZeroRateAndUnitLambdaIsANoOp) {
  StepFixture f = make_step_fixture(8);
  f.state.bank.lambda = 1.0;
  Hyperparams hp;
  hp.lr_online = 0.0;
  hp.batch_target = 2;
  hp.batch_replay = 2;
  // BN statistics move in TrainUpdate, so compare parameters only
  const AdaptState before = f.state;
  adapt_step(f.state, f.target, &f.replay, 0.5, hp);
  auto same_params = [](const ModelCheckpoint& a, const ModelCheckpoint& b) {
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (!(pa[i]->data() == pb[i]->data()).all()) return false;
    return true;
  };
  EXPECT_TRUE(same_params(f.state.live, before.live));
  EXPECT_TRUE(same_params(f.state.momentum, before.momentum));
  EXPECT_TRUE(f.state.static_model.same_state(before.static_model));
  EXPECT_TRUE(f.state.dynamic.same_state(before.dynamic));
  EXPECT_TRUE(f.state.bank.eta == before.bank.eta);
}

TEST(AdaptStep, ReportMatchesStandaloneLosses) {
  StepFixture f = make_step_fixture(9);
  Hyperparams hp;
  const AdaptState before = f.state;
  const StepReport rep = adapt_step(f.state, f.target, &f.replay, 1.0, hp);

  const Prediction mom = forward(before.momentum, f.target);
  const Prediction stat = forward(before.static_model, f.target);
  const std::vector<int> y_hat = rectify(stat.probs, proto_predict(before.bank, mom.features));
  ModelCheckpoint live = before.live;
  Graph g;
  const ForwardVars t = forward(g, live, f.target, BNMode::TrainUpdate);
  EXPECT_EQ(rep.loss_pseudo, loss_pseudo(t.probs, y_hat, hp.alpha, hp.beta).value().item());
  EXPECT_EQ(rep.loss_reg, loss_reg(t.probs, hp.gamma).value().item());
  const ForwardVars r = forward(g, live, f.replay.images, BNMode::TrainFrozen);
  EXPECT_EQ(rep.loss_task, loss_task(r.probs, f.replay.labels).value().item());
  EXPECT_EQ(rep.z, batch_confidence(stat.probs));
}

TEST(AdaptStep, Deterministic) {
  StepFixture a = make_step_fixture(10), b = make_step_fixture(10);
  const StepReport ra = adapt_step(a.state, a.target, &a.replay, 0.3, Hyperparams{});
  const StepReport rb = adapt_step(b.state, b.target, &b.replay, 0.3, Hyperparams{});
  EXPECT_EQ(ra.loss_task, rb.loss_task);
  EXPECT_EQ(ra.loss_pseudo, rb.loss_pseudo);
  EXPECT_EQ(ra.loss_reg, rb.loss_reg);
  EXPECT_TRUE(a.state.live.same_state(b.state.live));
  EXPECT_TRUE(a.state.bank.eta == b.state.bank.eta);
}

TEST(AdaptStep, ReplayPassDoesNotMoveStatistics) {
  StepFixture with = make_step_fixture(11), without = make_step_fixture(11);
  adapt_step(with.state, with.target, &with.replay, 1.0, Hyperparams{});
  adapt_step(without.state, without.target, nullptr, 1.0, Hyperparams{});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(with.state.live.blocks[i].bn == without.state.live.blocks[i].bn);
}

TEST(AdaptStep, EmptyReplaySkipsTaskLoss) {
  StepFixture f = make_step_fixture(12);
  const StepReport rep = adapt_step(f.state, f.target, nullptr, 1.0, Hyperparams{});
  EXPECT_EQ(rep.loss_task, 0.0);
}

TEST(AdaptStep, StaticCheckpointNeverChanges) {
  StepFixture f = make_step_fixture(13);
  const ModelCheckpoint stat = f.state.static_model;
  for (int i = 0; i < 3; ++i) adapt_step(f.state, f.target, &f.replay, 0.0, Hyperparams{});
  EXPECT_TRUE(f.state.static_model.same_state(stat));
}

TEST(Hyperparams, Validation) {
  Hyperparams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.alpha = -1.0;
  EXPECT_THROW(hp.validate(), ConfigError);
  hp = Hyperparams{};
  hp.ema_momentum = 1.0;
  EXPECT_THROW(hp.validate(), ConfigError);
}

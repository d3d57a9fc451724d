#include <gtest/gtest.h>

#include <random>

#include "onda/error.hpp"
#include "onda/switch_policy.hpp"

using namespace onda;

namespace {

PolicyConfig config(PolicyKind kind) {
  PolicyConfig c;
  c.kind = kind;
  c.t_c = 0.5;
  c.t_s = 0.5;
  c.t_d = 0.4;
  c.t_ca = 0.5;
  c.t_cb = 0.4;
  return c;
}

}  // namespace

TEST(Policy, ConfidenceSwitch) {
  SwitchPolicy p(config(PolicyKind::CS));
  EXPECT_EQ(p.update(0.51, 0), 1.0);
  EXPECT_EQ(p.update(0.5, 0), 0.0);
  EXPECT_EQ(p.update(0.2, 1), 0.0);
}

TEST(Policy, SoftSwitchIsClampedRamp) {
  SwitchPolicy p(config(PolicyKind::SCS));
  EXPECT_EQ(p.update(0.6, 0), 1.0);
  EXPECT_EQ(p.update(0.3, 0), 0.0);
  EXPECT_NEAR(p.update(0.45, 0), 0.5, 1e-12);
  EXPECT_NEAR(p.update(0.425, 0), 0.25, 1e-12);
}

TEST(Policy, SoftSwitchMonotone) {
  const PolicyConfig c = config(PolicyKind::SCS);
  double prev = 0.0;
  for (double mu = 0.0; mu <= 1.0; mu += 0.01) {
    const double d = delta_scs(mu, c);
    EXPECT_GE(d, prev);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0);
    prev = d;
  }
}

TEST(Policy, DomainSwitchHoldsBetweenEvents) {
  SwitchPolicy p(config(PolicyKind::CDS));
  EXPECT_EQ(p.update(0.0, 0), 1.0);
  EXPECT_EQ(p.update(0.9, -1), 0.0);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(p.update(0.9, 0), 0.0);
  EXPECT_EQ(p.update(0.1, 1), 1.0);
  EXPECT_EQ(p.update(0.1, 0), 1.0);
}

TEST(Policy, HybridBands) {
  SwitchPolicy p(config(PolicyKind::HS));
  EXPECT_EQ(p.update(0.6, -1), 1.0);  // above T_cA wins
  EXPECT_EQ(p.update(0.45, 0), 0.0);  // CDS recursion already saw -1
  EXPECT_EQ(p.update(0.3, 1), 0.0);   // below T_cB wins
  EXPECT_EQ(p.update(0.45, 0), 1.0);  // ...but the +1 was recorded
}

TEST(Policy, HybridEqualsCdsInsideBand) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> ind(-1, 1);
  std::uniform_real_distribution<double> mu(0.41, 0.49);
  SwitchPolicy hs(config(PolicyKind::HS)), cds(config(PolicyKind::CDS));
  for (int i = 0; i < 500; ++i) {
    const int k = i % 7 == 0 ? ind(rng) : 0;
    const double m = mu(rng);
    EXPECT_EQ(hs.update(m, k), cds.update(m, k));
  }
}

TEST(Policy, FixedPolicies) {
  SwitchPolicy s(config(PolicyKind::StaticOnly)), d(config(PolicyKind::DynamicOnly));
  for (double mu : {0.0, 0.45, 1.0}) {
    EXPECT_EQ(s.update(mu, -1), 1.0);
    EXPECT_EQ(d.update(mu, 1), 0.0);
  }
}

TEST(Policy, DeltaAlwaysInUnitInterval) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> mu(-1.0, 2.0);
  std::uniform_int_distribution<int> ind(-1, 1);
  for (PolicyKind k : {PolicyKind::CS, PolicyKind::SCS, PolicyKind::CDS, PolicyKind::HS}) {
    SwitchPolicy p(config(k));
    for (int i = 0; i < 1000; ++i) {
      const double d = p.update(mu(rng), ind(rng));
      EXPECT_GE(d, 0.0);
      EXPECT_LE(d, 1.0);
      EXPECT_EQ(p.state().delta_prev, d);
    }
  }
}

TEST(Policy, Validation) {
  PolicyConfig c = config(PolicyKind::SCS);
  c.t_d = c.t_s;
  EXPECT_THROW(SwitchPolicy{c}, ConfigError);
  c = config(PolicyKind::HS);
  c.t_cb = 0.6;
  EXPECT_THROW(SwitchPolicy{c}, ConfigError);
  EXPECT_THROW(policy_from_string("soft"), ConfigError);
  for (PolicyKind k : {PolicyKind::CS, PolicyKind::SCS, PolicyKind::CDS, PolicyKind::HS, PolicyKind::StaticOnly,
                       PolicyKind::DynamicOnly})
    EXPECT_EQ(policy_from_string(to_string(k)), k);
}

TEST(OnEvent, PromotesLiveAndLogs) {
  ArchConfig a;
  a.hidden_channels = 4;
  a.feature_dim = 4;
  a.num_classes = 3;
  a.height = 8;
  a.width = 8;
  ModelCheckpoint live = init_model(a, 1), dyn = init_model(a, 2);
  dyn.role = ModelRole::Dynamic;
  std::vector<SwitchEvent> log;
  SwitchEvent ev;
  ev.t = 77;
  on_event(ev, live, dyn, log);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].t, 77);
  const auto pl = live.parameters();
  const auto pd = dyn.parameters();
  for (std::size_t i = 0; i < pl.size(); ++i) EXPECT_TRUE((pl[i]->data() == pd[i]->data()).all());
  EXPECT_EQ(dyn.role, ModelRole::Dynamic);
}

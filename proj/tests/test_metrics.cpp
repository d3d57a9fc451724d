#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "onda/error.hpp"
#include "onda/metrics.hpp"

using namespace onda;

TEST(Confusion, RowsAreTruth) {
  Confusion cm = make_confusion(3);
  const std::vector<int> truth{0, 0, 1, 2}, pred{0, 1, 1, 1};
  accumulate(cm, truth, pred);
  EXPECT_EQ(cm(0, 0), 1);
  EXPECT_EQ(cm(0, 1), 1);
  EXPECT_EQ(cm(2, 1), 1);
  EXPECT_EQ(cm.sum(), 4);
}

TEST(Confusion, Preconditions) {
  Confusion cm = make_confusion(2);
  const std::vector<int> a{0, 1}, b{0}, bad{0, 2};
  EXPECT_THROW(accumulate(cm, a, b), ShapeError);
  EXPECT_THROW(accumulate(cm, a, bad), ConfigError);
}

TEST(MIoU, HandComputed) {
  Confusion cm = make_confusion(2);
  cm << 3, 1, 2, 4;
  const IoUResult r = miou(cm);
  EXPECT_NEAR(r.per_class[0], 3.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.per_class[1], 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(r.miou, (0.5 + 4.0 / 7.0) / 2.0, 1e-15);
}

TEST(MIoU, PerfectAndAbsentClasses) {
  Confusion cm = make_confusion(3);
  cm(0, 0) = 5;
  cm(1, 1) = 2;
  const IoUResult r = miou(cm);
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
  EXPECT_THROW(miou(make_confusion(3)), ConfigError);
}

TEST(MIoU, BoundedForRandomMatrices) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<long long> u(0, 50);
  for (int i = 0; i < 100; ++i) {
    Confusion cm = make_confusion(5);
    for (Eigen::Index k = 0; k < cm.size(); ++k) cm.data()[k] = u(rng);
    cm(0, 0) += 1;
    const double m = miou(cm).miou;
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
  }
}

TEST(HMean, ReferenceRows) {
  EXPECT_NEAR(hmean(std::vector<double>{64.5, 57.1, 48.7, 41.5, 34.4, 18.5}).value, 37.3, 0.1);
  EXPECT_NEAR(hmean(std::vector<double>{64.5, 60.4, 57.3, 54.8, 52.0, 42.2}).value, 54.2, 0.1);
}

TEST(HMean, Oracle) {
  const std::vector<double> v{2.0, 3.0, 6.0};
  EXPECT_NEAR(hmean(v).value, 3.0, 1e-15);
  EXPECT_EQ(hmean(std::vector<double>{7.0, 7.0}).value, 7.0);
}

TEST(HMean, ZeroAndInvalid) {
  const HMean z = hmean(std::vector<double>{3.0, 0.0, 5.0});
  EXPECT_EQ(z.value, 0.0);
  EXPECT_TRUE(z.had_zero);
  EXPECT_THROW(hmean(std::vector<double>{}), ConfigError);
  EXPECT_THROW(hmean(std::vector<double>{1.0, -1.0}), ConfigError);
}

TEST(HMean, BetweenMinAndArithmeticMean) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(1.0, 90.0);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(6);
    for (double& x : v) x = u(rng);
    const double h = hmean(v).value;
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 6.0;
    EXPECT_GE(h, *std::min_element(v.begin(), v.end()) - 1e-12);
    EXPECT_LE(h, mean + 1e-12);
  }
}

TEST(HMean, FloatInstantiation) {
  const std::vector<float> v{2.0f, 3.0f, 6.0f};
  EXPECT_NEAR(hmean(std::span<const float>(v)).value, 3.0, 1e-6);
}

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "gpelab/encodings.hpp"
#include "gpelab/gpe.hpp"

namespace gpelab {
namespace {

std::vector<double> random_vector(std::mt19937_64& rng, int d, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(static_cast<std::size_t>(d));
  for (double& x : v) x = normal(rng);
  return v;
}

double norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

TEST(RopeAngles, ZeroPositionGivesZeroAngles) {
  EXPECT_EQ(rope_angles(4, 10000.0, 0), (std::vector<double>{0.0, 0.0}));
}

TEST(RopeAngles, BlockSchedule) {
  // 2 * 10000^0 and 2 * 10000^(-1/2) = 0.02 (checked at 40 digits).
  const auto a = rope_angles(4, 10000.0, 2);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_DOUBLE_EQ(a[0], 2.0);
  EXPECT_NEAR(a[1], 0.02, 1e-16);
}

TEST(RopeAngles, FirstBlockIgnoresBase) {
  for (double base : {2.0, 10.0, 10000.0, 1e6}) {
    EXPECT_EQ(rope_angles(2, base, 1), std::vector<double>{1.0});
  }
}

TEST(RopeAngles, RejectsBadArguments) {
  EXPECT_THROW(rope_angles(3, 10000.0, 1), std::invalid_argument);
  EXPECT_THROW(rope_angles(0, 10000.0, 1), std::invalid_argument);
  EXPECT_THROW(rope_angles(4, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(rope_angles(4, -1.0, 1), std::invalid_argument);
}

TEST(ApplyRotation, IdentityAndQuarterTurn) {
  const std::vector<double> v{0.3, -1.2, 2.5, 0.7};
  EXPECT_EQ(apply_rotation(v, std::vector<double>{0.0, 0.0}), v);

  const auto r = apply_rotation(std::vector<double>{1.0, 0.0},
                                std::vector<double>{std::numbers::pi / 2});
  EXPECT_NEAR(r[0], 0.0, 1e-12);
  EXPECT_NEAR(r[1], 1.0, 1e-12);
}

TEST(ApplyRotation, PreservesNorm) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> angle(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto v = random_vector(rng, 16);
    std::vector<double> angles(8);
    for (double& a : angles) a = angle(rng);
    EXPECT_NEAR(norm(apply_rotation(v, angles)), norm(v), 1e-12);
  }
}

TEST(ApplyRotation, DimensionMismatch) {
  EXPECT_THROW(apply_rotation(std::vector<double>{1, 2, 3}, std::vector<double>{0.1}),
               std::invalid_argument);
}

TEST(RopeScore, ZeroPositionIsDotProduct) {
  std::mt19937_64 rng(11);
  const auto q = random_vector(rng, 8);
  const auto k = random_vector(rng, 8);
  EXPECT_EQ(rope_score(q, k, 0), dot(q, k));
}

TEST(RopeScore, SingleBlockIsCosine) {
  const std::vector<double> e1{1.0, 0.0};
  for (RelPosition n : {0, 1, 2, 5, 17, 1000}) {
    // q^T R(n) e1 = (1, 0) . (cos n, sin n)
    EXPECT_NEAR(rope_score(e1, e1, n, 123.0), std::cos(static_cast<double>(n)), 1e-12);
  }
}

TEST(RopeScore, CauchySchwarzBound) {
  std::mt19937_64 rng(3);
  const auto q = random_vector(rng, 32);
  const auto k = random_vector(rng, 32);
  for (RelPosition n = 0; n < 500; ++n) {
    EXPECT_LE(std::abs(rope_score(q, k, n)), norm(q) * norm(k) + 1e-12);
  }
}

TEST(AlibiSlopes, GeometricSequence) {
  const auto one = alibi_slopes(1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_NEAR(one[0], 0.39685026299204987, 1e-15);

  const auto three = alibi_slopes(3);
  const double ratio = std::pow(2.0, -4.0 / 3.0);
  EXPECT_DOUBLE_EQ(three[1] / three[0], ratio);
  EXPECT_DOUBLE_EQ(three[2] / three[1], ratio);
  for (double s : alibi_slopes(8)) EXPECT_GT(s, 0.0);
  EXPECT_THROW(alibi_slopes(0), std::invalid_argument);
}

TEST(AlibiScore, LinearPenalty) {
  const std::vector<double> q{1.0, 0.0};
  const std::vector<double> k{0.0, 1.0};
  EXPECT_EQ(alibi_score(q, k, 0, 0.5), 0.0);
  EXPECT_EQ(alibi_score(q, k, 4, 0.5), -2.0);
  std::mt19937_64 rng(5);
  const auto a = random_vector(rng, 6);
  const auto b = random_vector(rng, 6);
  EXPECT_EQ(alibi_score(a, b, 0, 0.7), dot(a, b));
  for (RelPosition n = 1; n < 100; ++n) {
    EXPECT_LE(alibi_score(a, b, n, 0.7), alibi_score(a, b, n - 1, 0.7));
  }
}

TEST(ApeTemp, Values) {
  EXPECT_EQ(ape_temp(0, 0.3), 1.0);
  EXPECT_DOUBLE_EQ(ape_temp(10, 0.1), 0.5);
  for (RelPosition n = 0; n < 50; ++n) EXPECT_EQ(ape_temp(n, 0.0), 1.0);
  for (RelPosition n = 1; n < 50; ++n) EXPECT_LT(ape_temp(n, 0.1), ape_temp(n - 1, 0.1));
}

TEST(ApeBias, Values) {
  EXPECT_EQ(ape_bias(0, 1.0, 1.0, 1.0), 0.0);
  EXPECT_EQ(ape_bias(5, 1.0, 0.0, 0.0), -5.0);
  // -(3 + ln 4 + sqrt 3), 40-digit reference.
  EXPECT_NEAR(ape_bias(3, 1.0, 1.0, 1.0), -6.118345168688767912, 1e-14);
}

TEST(ApeBias, DeeperThanLinearAndDecreasing) {
  for (RelPosition n = 0; n < 2000; ++n) {
    EXPECT_LE(ape_bias(n, 0.4, 0.2, 0.3), -0.4 * static_cast<double>(n));
  }
  for (RelPosition n = 2; n < 2000; ++n) {
    EXPECT_LT(ape_bias(n, 0.0, 0.0, 0.3), ape_bias(n - 1, 0.0, 0.0, 0.3));
    EXPECT_LT(ape_bias(n, 0.0, 0.2, 0.0), ape_bias(n - 1, 0.0, 0.2, 0.0));
  }
}

TEST(ApeScore, ZeroPosition) {
  std::mt19937_64 rng(9);
  const auto q = random_vector(rng, 8);
  const auto k = random_vector(rng, 8);
  ApeParams p;
  p.alpha = ApeParams::rope_schedule(8);
  const auto s = ape_score(q, k, 0, p);
  EXPECT_EQ(s.multiplicative, dot(q, k));
  EXPECT_EQ(s.bias, 0.0);
}

TEST(ApeScore, DegeneratesToRope) {
  std::mt19937_64 rng(13);
  const auto q = random_vector(rng, 16);
  const auto k = random_vector(rng, 16);
  ApeParams p;
  p.lambda = 0.0;
  p.delta = 1e-300;
  p.beta = 0.0;
  p.gamma = 0.0;
  p.alpha = ApeParams::rope_schedule(16);
  for (RelPosition n = 0; n < 300; ++n) {
    EXPECT_NEAR(ape_score(q, k, n, p).total, rope_score(q, k, n), 1e-12);
  }
}

TEST(ApeScore, DegeneratesToAlibiExactly) {
  std::mt19937_64 rng(17);
  const auto q = random_vector(rng, 8);
  const auto k = random_vector(rng, 8);
  ApeParams p;
  p.lambda = 0.0;
  p.delta = 0.25;
  p.beta = 0.0;
  p.gamma = 0.0;
  p.alpha.assign(4, std::numeric_limits<double>::infinity());
  for (RelPosition n = 0; n < 300; ++n) {
    EXPECT_EQ(ape_score(q, k, n, p).total, alibi_score(q, k, n, 0.25));
  }
}

TEST(ApeScore, TemperatureBoundsMultiplicativePart) {
  std::mt19937_64 rng(19);
  ApeParams p;
  p.lambda = 0.1;
  p.alpha = ApeParams::rope_schedule(32);
  for (int trial = 0; trial < 100; ++trial) {
    auto q = random_vector(rng, 32);
    auto k = random_vector(rng, 32);
    const double nq = norm(q);
    const double nk = norm(k);
    for (double& x : q) x /= nq;
    for (double& x : k) x /= nk;
    EXPECT_LE(std::abs(ape_score(q, k, 50, p).multiplicative), 1.0 / 6.0 + 1e-15);
  }
}

}  // namespace
}  // namespace gpelab

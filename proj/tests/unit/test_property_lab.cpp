#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "gtest/gtest.h"
#include "gpelab/encodings.hpp"
#include "gpelab/property_lab.hpp"

namespace gpelab::lab {
namespace {

const std::vector<double> kE1{1.0, 0.0};
const std::vector<double> kE2{0.0, 1.0};

ApeEncoding reference_ape(int d) { return make_ape(0.1, 0.5, 0.1, 0.1, d); }

// Closed-form entropy of the geometric distribution p(n) ∝ r^n.
double geometric_entropy(double m) {
  const double r = std::exp(-m);
  return -std::log1p(-r) - r * std::log(r) / (1.0 - r);
}

TEST(PartialNormalization, AlibiGeometricTerms) {
  const AlibiEncoding enc{std::numbers::ln2};
  const auto z1 = partial_normalization(kE1, kE2, enc, 1);
  ASSERT_TRUE(z1.z.has_value());
  EXPECT_NEAR(*z1.z, 1.5, 1e-15);

  const auto z200 = partial_normalization(kE1, kE2, enc, 200);
  EXPECT_NEAR(*z200.z, 2.0, 1e-9);

  // 1 / (1 - e^{-m}) for m = 0.5, reference 2.5414940825367982841.
  const auto zinf = partial_normalization(kE1, kE2, AlibiEncoding{0.5}, 2000);
  EXPECT_NEAR(*zinf.z, 2.5414940825367982841, 1e-9);
}

TEST(PartialNormalization, RopeMatchesDirectSummation) {
  long double direct = 0.0L;
  for (int n = 0; n <= 1000; ++n) direct += std::exp(std::cos(static_cast<long double>(n)));
  const auto z = partial_normalization(kE1, kE1, RopeEncoding{}, 1000);
  ASSERT_TRUE(z.z.has_value());
  EXPECT_NEAR(*z.z / static_cast<double>(direct), 1.0, 1e-9);
}

TEST(PartialNormalization, OverflowKeepsLogDomain) {
  CustomGpe growing;
  growing.bias = [](RelPosition n) { return static_cast<double>(n); };
  const auto z = partial_normalization(kE1, kE1, growing, 2000);
  EXPECT_FALSE(z.z.has_value());
  // log sum_{n<=2000} e^{1+n} = 2001 + log(1/(1-e^{-1})) up to e^{-2000}
  EXPECT_NEAR(z.log_z, 2001.0 - std::log1p(-std::exp(-1.0)), 1e-9);
}

TEST(PartialNormalization, NonFiniteScoreRejected) {
  CustomGpe broken;
  broken.bias = [](RelPosition n) { return n == 3 ? std::nan("") : 0.0; };
  EXPECT_THROW(partial_normalization(kE1, kE1, broken, 10), std::domain_error);
  EXPECT_THROW(partial_normalization(kE1, kE1, RopeEncoding{}, -1), std::invalid_argument);
}

TEST(PartialNormalization, MonotoneInLength) {
  std::mt19937_64 rng(3);
  const std::vector<Encoding> encs{RopeEncoding{}, AlibiEncoding{0.2}, reference_ape(16)};
  for (const auto& enc : encs) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto q = sample_unit_vector(16, rng(), 0);
      const auto k = sample_unit_vector(16, rng(), 1);
      std::vector<std::int64_t> grid;
      for (std::int64_t l = 0; l <= 3000; l += 13) grid.push_back(l);
      const auto curve = normalization_curve(q, k, enc, grid);
      ASSERT_EQ(curve.entries.size(), grid.size());
      EXPECT_NEAR(curve.entries[0].log_z, gpe_score(q, k, 0, enc).total, 1e-15);
      for (std::size_t i = 1; i < curve.entries.size(); ++i) {
        EXPECT_GE(curve.entries[i].log_z, curve.entries[i - 1].log_z);
      }
    }
  }
}

TEST(ClassifyConvergence, ExpectedVerdicts) {
  const auto grid = default_grid();
  EXPECT_EQ(classify_convergence(kE1, kE1, AlibiEncoding{0.5}, grid),
            ConvergenceClass::kConvergent);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto q = sample_unit_vector(64, seed, 0);
    const auto k = sample_unit_vector(64, seed, 1);
    EXPECT_EQ(classify_convergence(q, k, RopeEncoding{}, grid), ConvergenceClass::kDivergent);
    EXPECT_EQ(classify_convergence(q, k, reference_ape(64), grid), ConvergenceClass::kConvergent);
  }
}

TEST(ClassifyConvergence, SlowDecayIsUndetermined) {
  // e^{A(n)} = (n+1)^{-1/2}: Z_L ~ 2 sqrt(L), ratio sqrt(2) per doubling.
  CustomGpe slow;
  slow.bias = [](RelPosition n) { return -0.5 * std::log1p(static_cast<double>(n)); };
  EXPECT_EQ(classify_convergence(kE1, kE1, slow, default_grid()),
            ConvergenceClass::kUndetermined);
}

TEST(ClassifyConvergence, GridValidation) {
  const std::vector<std::int64_t> short_grid{64, 128, 256, 512};
  EXPECT_THROW(classify_convergence(kE1, kE1, RopeEncoding{}, short_grid), std::invalid_argument);
  const std::vector<std::int64_t> uneven{64, 128, 256, 500, 1000};
  EXPECT_THROW(classify_convergence(kE1, kE1, RopeEncoding{}, uneven), std::invalid_argument);
}

TEST(TruncatedEntropy, UniformScores) {
  const CustomGpe flat = identity_encoding();
  for (std::int64_t len : {0, 1, 10, 999}) {
    EXPECT_NEAR(truncated_entropy(kE1, kE2, flat, len), std::log(static_cast<double>(len + 1)),
                1e-12);
  }
}

TEST(TruncatedEntropy, PointMass) {
  CustomGpe spike;
  spike.bias = [](RelPosition n) { return n == 5 ? 0.0 : -50.0; };
  EXPECT_LE(truncated_entropy(kE1, kE2, spike, 20), 1e-9);
}

TEST(TruncatedEntropy, AlibiGeometricClosedForm) {
  for (double m : {0.1, 0.5, 1.0, std::numbers::ln2}) {
    EXPECT_NEAR(truncated_entropy(kE1, kE2, AlibiEncoding{m}, 4000), geometric_entropy(m), 1e-9)
        << "m = " << m;
  }
  // 40-digit reference for m = 0.5.
  EXPECT_NEAR(geometric_entropy(0.5), 1.7034991708355877139, 1e-13);
}

TEST(TruncatedEntropy, NeverExceedsUniformBound) {
  std::mt19937_64 rng(5);
  const std::vector<Encoding> encs{RopeEncoding{}, AlibiEncoding{0.05}, reference_ape(8)};
  for (const auto& enc : encs) {
    const auto q = sample_unit_vector(8, rng(), 0);
    const auto k = sample_unit_vector(8, rng(), 1);
    for (std::int64_t len : {0, 3, 50, 700}) {
      const double h = truncated_entropy(q, k, enc, len);
      EXPECT_GE(h, 0.0);
      EXPECT_LE(h, std::log(static_cast<double>(len + 1)) + 1e-12);
    }
  }
}

TEST(EntropyCurve, RopeGrowsByLn2PerDoubling) {
  const auto q = sample_unit_vector(64, 77, 0);
  const auto k = sample_unit_vector(64, 77, 1);
  const auto curve = entropy_curve(q, k, RopeEncoding{}, default_grid());
  ASSERT_EQ(curve.entries.size(), 9u);
  // Least-squares slope of H against log2 L over L >= 1024.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int count = 0;
  for (const auto& e : curve.entries) {
    if (e.length < 1024) continue;
    const double x = std::log2(static_cast<double>(e.length));
    sx += x;
    sy += e.entropy;
    sxx += x * x;
    sxy += x * e.entropy;
    ++count;
  }
  const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
  EXPECT_NEAR(slope, std::numbers::ln2, 0.05);
  EXPECT_EQ(classify_entropy(curve), EntropyVerdict::kUnbounded);
}

TEST(EntropyCurve, AlibiFlatBeyondDecayScale) {
  const double m = 0.5;
  std::vector<std::int64_t> grid;
  for (std::int64_t l = 64; l <= 16384; l *= 2) grid.push_back(l);  // 64 > 20/m
  const auto q = sample_unit_vector(32, 1, 0);
  const auto k = sample_unit_vector(32, 1, 1);
  const auto curve = entropy_curve(q, k, AlibiEncoding{m}, grid);
  for (std::size_t i = 1; i < curve.entries.size(); ++i) {
    EXPECT_LT(std::abs(curve.entries[i].entropy - curve.entries[i - 1].entropy), 1e-6);
  }
  EXPECT_EQ(classify_entropy(curve), EntropyVerdict::kBounded);
}

TEST(EntropyCurve, UniformIsExactLog) {
  const auto grid = default_grid();
  const auto curve = entropy_curve(kE1, kE1, identity_encoding(), grid);
  for (const auto& e : curve.entries) {
    EXPECT_NEAR(e.entropy, std::log(static_cast<double>(e.length + 1)), 1e-12);
  }
}

TEST(McMoments, AssumptionOneIdentity) {
  const int d = 64;
  const std::int64_t samples = 100000;
  const auto m = mc_score_moments(identity_encoding(), 0, d, samples, 2024);
  const double band = 3.0 * std::sqrt(1.0 / (d * static_cast<double>(samples)));
  EXPECT_LE(std::abs(m.mean), band);
  EXPECT_LE(std::abs(m.variance - 1.0 / d) / (1.0 / d), 0.03);
  EXPECT_EQ(m.samples, samples);
}

TEST(McMoments, RopeAlibiApe) {
  const int d = 64;
  const std::int64_t samples = 100000;
  const double band = 3.0 * std::sqrt(1.0 / (d * static_cast<double>(samples)));

  const auto rope = mc_score_moments(RopeEncoding{}, 37, d, samples, 1);
  EXPECT_LE(std::abs(rope.mean), band);
  EXPECT_LE(std::abs(rope.variance * d - 1.0), 0.03);

  const auto alibi = mc_score_moments(AlibiEncoding{0.5}, 6, d, samples, 2);
  EXPECT_LE(std::abs(alibi.mean + 3.0), band);

  const auto ape = mc_score_moments(make_ape(0.1, 0.5, 0.1, 0.1, d), 10, d, samples, 3,
                                    ScoreComponent::kMultiplicative);
  const double expected = 1.0 / (d * 4.0);
  EXPECT_LE(std::abs(ape.variance - expected) / expected, 0.05);
}

TEST(McMoments, DeterministicFromSeed) {
  const auto a = mc_score_moments(RopeEncoding{}, 5, 16, 500, 99);
  const auto b = mc_score_moments(RopeEncoding{}, 5, 16, 500, 99);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
  const auto c = mc_score_moments(RopeEncoding{}, 5, 16, 500, 100);
  EXPECT_NE(a.mean, c.mean);
  EXPECT_EQ(mc_score_moments(RopeEncoding{}, 5, 16, 1, 99).variance, 0.0);
}

TEST(SampleUnitVector, UnitNormAndCounterBased) {
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto v = sample_unit_vector(33, 5, i);
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    EXPECT_NEAR(std::sqrt(n2), 1.0, 1e-12);
  }
  EXPECT_EQ(sample_unit_vector(8, 5, 17), sample_unit_vector(8, 5, 17));
  EXPECT_NE(sample_unit_vector(8, 5, 17), sample_unit_vector(8, 5, 18));
}

TEST(LdcpRange, AlibiFloorFormula) {
  EXPECT_EQ(ldcp_range(AlibiEncoding{0.5}, 4.0, 1000).range, 8);
  for (double m : {0.25, 0.5, 1.0, 2.0}) {
    for (double c1 : {1.0, 3.0, 4.0, 10.0}) {
      EXPECT_EQ(ldcp_range(AlibiEncoding{m}, c1, 10000).range,
                static_cast<std::int64_t>(std::floor(c1 / m)));
    }
  }
}

TEST(LdcpRange, ApeReducesToAlibiAndNeverExceedsIt) {
  EXPECT_EQ(ldcp_range(make_ape(0.1, 0.5, 0.0, 0.0, 2), 4.0, 1000).range, 8);

  const double delta = 0.5, beta = 0.2, gamma = 0.3, c1 = 4.0;
  // Linear scan oracle on the decay magnitude written out directly.
  std::int64_t oracle = 0;
  for (std::int64_t n = 0;; ++n) {
    const double x = static_cast<double>(n);
    if (delta * x + beta * std::log(1.0 + x) + gamma * std::sqrt(x) > c1) {
      oracle = n - 1;
      break;
    }
  }
  const auto ape = ldcp_range(make_ape(0.1, delta, beta, gamma, 2), c1, 1000);
  EXPECT_EQ(ape.range, oracle);
  EXPECT_EQ(oracle, 5);  // 2.5 + 0.2 ln 6 + 0.3 sqrt 5 = 3.53; n = 6 gives 4.12
  EXPECT_LE(ape.range, ldcp_range(AlibiEncoding{delta}, c1, 1000).range);
}

TEST(LdcpRange, RopeNeverDecays) {
  const auto r = ldcp_range(RopeEncoding{}, 0.1, 5000);
  EXPECT_TRUE(r.unbounded_within_scan);
  EXPECT_EQ(r.range, 5000);
  EXPECT_THROW(ldcp_range(RopeEncoding{}, 0.0, 10), std::invalid_argument);
  EXPECT_THROW(ldcp_range(RopeEncoding{}, -1.0, 10), std::invalid_argument);
}

TEST(TailProbability, AlibiDeterministicallySuppressed) {
  const double m = 0.5, c1 = 1.0;
  const RelPosition n = 6;  // m*n - 1 = 2 > c1
  const auto t = tail_probability_mc(AlibiEncoding{m}, n, c1, 16, 20000, 4);
  EXPECT_EQ(t.hits, 0);
  EXPECT_EQ(t.probability, 0.0);
  EXPECT_EQ(t.wilson_low, 0.0);
  EXPECT_GT(t.wilson_high, 0.0);
}

TEST(TailProbability, ApeEstimateWithInterval) {
  const auto t = tail_probability_mc(make_ape(0.01, 0.05, 0.0, 0.0, 8), 6, -0.5, 8, 20000, 4);
  EXPECT_GE(t.probability, 0.0);
  EXPECT_LE(t.wilson_low, t.probability);
  EXPECT_GE(t.wilson_high, t.probability);
  EXPECT_GT(t.probability, 0.0);
  EXPECT_LT(t.probability, 1.0);
}

TEST(TailProbability, VeryNegativeThresholdIsCertain) {
  const std::vector<Encoding> encs{RopeEncoding{}, AlibiEncoding{0.5}, reference_ape(16)};
  for (const auto& enc : encs) {
    EXPECT_EQ(tail_probability_mc(enc, 100, -1e300, 16, 500, 1).probability, 1.0);
  }
}

TEST(GradQ, ClosedForms) {
  std::mt19937_64 rng(8);
  const auto q = sample_unit_vector(6, 1, 0);
  const auto k = sample_unit_vector(6, 1, 1);
  for (RelPosition n : {0, 1, 9, 1000}) {
    EXPECT_EQ(grad_q_analytic(q, k, n, AlibiEncoding{0.5}), k);
  }
  const std::vector<double> any_q{0.3, -2.0};
  for (RelPosition n : {0, 1, 2, 13}) {
    const auto g = grad_q_analytic(any_q, kE1, n, RopeEncoding{});
    EXPECT_NEAR(g[0], std::cos(static_cast<double>(n)), 1e-12);
    EXPECT_NEAR(g[1], std::sin(static_cast<double>(n)), 1e-12);
  }
  EXPECT_EQ(grad_q_analytic(q, k, 0, make_ape(0.1, 0.5, 0.1, 0.1, 6)), k);
}

TEST(GradCheck, FiniteDifferencesAgree) {
  const int d = 16;
  const std::vector<Encoding> encs{RopeEncoding{}, AlibiEncoding{0.5}, reference_ape(d)};
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<RelPosition> pos(0, 5000);
  for (const auto& enc : encs) {
    for (int trial = 0; trial < 100; ++trial) {
      const auto q = sample_unit_vector(d, rng(), 0);
      const auto k = sample_unit_vector(d, rng(), 1);
      EXPECT_LT(grad_check(q, k, pos(rng), enc), 1e-6) << encoding_name(enc);
    }
  }
}

TEST(GradCheck, ZeroKeyGivesZeroGradients) {
  const std::vector<double> zero(4, 0.0);
  const auto q = sample_unit_vector(4, 3, 0);
  for (const Encoding& enc : {Encoding{RopeEncoding{}}, Encoding{AlibiEncoding{0.5}},
                              Encoding{reference_ape(4)}}) {
    for (double g : grad_q_analytic(q, zero, 7, enc)) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(grad_check(q, zero, 7, enc), 0.0);
  }
}

TEST(GpsTest, ExpectedVerdicts) {
  const auto q = sample_unit_vector(32, 6, 0);
  const auto k = sample_unit_vector(32, 6, 1);
  for (RelPosition n1 = 0; n1 < 20; ++n1) {
    for (RelPosition n2 = 0; n2 < 20; ++n2) {
      EXPECT_FALSE(gps_test(q, k, AlibiEncoding{0.5}, n1, n2));
    }
  }
  EXPECT_TRUE(gps_test(kE2, kE1, RopeEncoding{}, 1, 2));
  EXPECT_TRUE(gps_test(q, k, RopeEncoding{}, 3, 40));
  EXPECT_TRUE(gps_test(q, k, reference_ape(32), 3, 40));
  EXPECT_FALSE(gps_test(q, k, RopeEncoding{}, 5, 5));
  EXPECT_FALSE(gps_test(q, k, reference_ape(32), 5, 5));
}

TEST(PropertyReport, Summary) {
  const int d = 64;
  const auto rope = build_property_report(RopeEncoding{}, d, 1);
  EXPECT_EQ(rope.convergence, ConvergenceClass::kDivergent);
  EXPECT_EQ(rope.entropy, EntropyVerdict::kUnbounded);
  EXPECT_TRUE(rope.gps);
  EXPECT_TRUE(rope.ldcp.unbounded_within_scan);

  const auto alibi = build_property_report(AlibiEncoding{0.5}, d, 1);
  EXPECT_EQ(alibi.convergence, ConvergenceClass::kConvergent);
  EXPECT_TRUE(alibi.entropy_bounded());
  EXPECT_FALSE(alibi.gps);
  EXPECT_EQ(alibi.ldcp.range, 2);

  const auto ape = build_property_report(reference_ape(d), d, 1);
  EXPECT_EQ(ape.convergence, ConvergenceClass::kConvergent);
  EXPECT_TRUE(ape.entropy_bounded());
  EXPECT_TRUE(ape.gps);
}

// Convergence and entropy verdicts agree, and the LDCP / convergence tradeoff
// holds, over several encodings and seeds.
TEST(PropertyReport, VerdictsAgreeAndTradeoffHolds) {
  const int d = 16;
  const std::vector<Encoding> encs{RopeEncoding{}, RopeEncoding{100.0}, AlibiEncoding{0.05},
                                   AlibiEncoding{1.5}, make_ape(0.5, 0.1, 0.0, 0.2, d),
                                   make_ape(0.0, 0.02, 0.3, 0.0, d)};
  for (const auto& enc : encs) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto report = build_property_report(enc, d, seed);
      const auto& h = report.entropy_curve.entries;
      const double last_inc = h.back().entropy - h[h.size() - 2].entropy;
      if (report.convergence == ConvergenceClass::kConvergent) {
        EXPECT_LT(std::abs(last_inc), kEntropyFlatEpsilon);
        // Expected score is unbounded below on the scan, so no LDCP floor.
        const double far = mc_score_moments(enc, 10000, d, 200, seed).mean;
        const double near = mc_score_moments(enc, 1000, d, 200, seed).mean;
        EXPECT_LT(far, near);
        EXPECT_LT(far, -10.0);
      }
      if (report.convergence == ConvergenceClass::kDivergent) {
        EXPECT_GE(last_inc, 0.5);
        EXPECT_LE(last_inc, 0.9);
        EXPECT_LE(std::abs(mc_score_moments(enc, 10000, d, 2000, seed).mean), 0.1);
      }
    }
  }
}

}  // namespace
}  // namespace gpelab::lab

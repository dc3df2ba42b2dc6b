#pragma once

// Numerical checks of the four positional-encoding properties: convergent
// normalization, entropy boundedness, long-distance correlation preservation
// (LDCP) and gradient positional sensitivity (GPS). Everything runs in double
// precision over causal relative positions n >= 0.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpelab/gpe.hpp"

namespace gpelab::lab {

// Divergence: Z_{2L} / Z_L >= 1 + kDivergenceEpsilon on every final doubling.
inline constexpr double kDivergenceEpsilon = 0.5;
// Convergence: (Z_{2L} - Z_L) / Z_L <= kConvergenceEpsilon on every final doubling.
inline constexpr double kConvergenceEpsilon = 1e-9;
// Number of trailing doublings the classifiers look at.
inline constexpr int kFinalDoublings = 2;
// Entropy increments per doubling below this count as saturated.
inline constexpr double kEntropyFlatEpsilon = 1e-6;
// Entropy increments per doubling at or above this count as logarithmic growth.
inline constexpr double kEntropyGrowthFloor = 0.5;

// {2^6, 2^7, ..., 2^14}.
std::vector<std::int64_t> default_grid();

struct Normalization {
  std::int64_t length = 0;
  double log_z = 0.0;
  // exp(log_z) when representable as a finite double.
  std::optional<double> z;
};

struct NormalizationCurve {
  std::vector<Normalization> entries;
};

struct EntropyPoint {
  std::int64_t length = 0;
  double entropy = 0.0;  // nats
};

struct EntropyCurve {
  std::vector<EntropyPoint> entries;
};

enum class ConvergenceClass { kConvergent, kDivergent, kUndetermined };
enum class EntropyVerdict { kBounded, kUnbounded, kUndetermined };

std::string to_string(ConvergenceClass c);
std::string to_string(EntropyVerdict v);

// Z_L = sum_{n=0}^{L} exp(A(n)), accumulated in the log domain.
Normalization partial_normalization(std::span<const double> q, std::span<const double> k,
                                    const Encoding& enc, std::int64_t max_len);

// Z_L at every grid point; one pass over n = 0..max(grid).
NormalizationCurve normalization_curve(std::span<const double> q, std::span<const double> k,
                                       const Encoding& enc, std::span<const std::int64_t> grid);

// The grid must be a doubling sequence with at least four doublings.
ConvergenceClass classify_convergence(const NormalizationCurve& curve);
ConvergenceClass classify_convergence(std::span<const double> q, std::span<const double> k,
                                      const Encoding& enc, std::span<const std::int64_t> grid);

// Shannon entropy (nats) of the softmax over n = 0..L.
double truncated_entropy(std::span<const double> q, std::span<const double> k,
                         const Encoding& enc, std::int64_t max_len);

// Entropy of softmax(scores), for callers that already hold a score sequence.
double softmax_entropy(std::span<const double> scores);

EntropyCurve entropy_curve(std::span<const double> q, std::span<const double> k,
                           const Encoding& enc, std::span<const std::int64_t> grid);

EntropyVerdict classify_entropy(const EntropyCurve& curve);

enum class ScoreComponent { kTotal, kMultiplicative, kBias };

struct McMoments {
  RelPosition n = 0;
  double mean = 0.0;
  double variance = 0.0;  // unbiased sample variance
  std::int64_t samples = 0;
  std::uint64_t seed = 0;
};

// Uniform unit vector of dimension d drawn from sub-stream `index` of `seed`.
// Sub-streams are counter-based, so sample i is the same no matter how the
// sampling is partitioned.
std::vector<double> sample_unit_vector(int d, std::uint64_t seed, std::uint64_t index);

// Moments of A(n) over i.i.d. (q, k) uniform on the unit sphere S^{d-1}.
McMoments mc_score_moments(const Encoding& enc, RelPosition n, int d, std::int64_t samples,
                           std::uint64_t seed,
                           ScoreComponent component = ScoreComponent::kTotal);

struct LdcpRange {
  // Largest n <= n_max with decay magnitude <= c1 for all 0..n; -1 if already
  // exceeded at n = 0.
  std::int64_t range = 0;
  // True when the threshold was never exceeded within [0, n_max].
  bool unbounded_within_scan = false;
};

// |E[A(n)]| under unit-sphere sampling, i.e. |b(n)| since E[q^T W(n) k] = 0.
double decay_magnitude(const Encoding& enc, RelPosition n);

LdcpRange ldcp_range(const Encoding& enc, double c1, std::int64_t n_max);

struct TailEstimate {
  double probability = 0.0;
  double wilson_low = 0.0;
  double wilson_high = 0.0;
  std::int64_t hits = 0;
  std::int64_t samples = 0;
};

// Monte-Carlo estimate of P(A(n) >= c1) under unit-sphere sampling, with a 95%
// Wilson score interval.
TailEstimate tail_probability_mc(const Encoding& enc, RelPosition n, double c1, int d,
                                 std::int64_t samples, std::uint64_t seed);

std::vector<double> grad_q_analytic(std::span<const double> q, std::span<const double> k,
                                    RelPosition n, const Encoding& enc);

// Central finite differences of A(n) in q with step h (each term of the
// decomposition differenced separately), compared coordinate-wise against
// grad_q_analytic. The error of each coordinate is divided by the
// largest analytic gradient magnitude (floored at 1e-12), so a zero gradient
// compared against zero yields 0.
double grad_check(std::span<const double> q, std::span<const double> k, RelPosition n,
                  const Encoding& enc, double h = 1e-6);

// True iff ||grad_q(n1) - grad_q(n2)|| > 1e-9.
bool gps_test(std::span<const double> q, std::span<const double> k, const Encoding& enc,
              RelPosition n1, RelPosition n2);

struct PropertyReport {
  std::string encoding;
  int dimension = 0;
  ConvergenceClass convergence = ConvergenceClass::kUndetermined;
  EntropyVerdict entropy = EntropyVerdict::kUndetermined;
  NormalizationCurve normalization;
  EntropyCurve entropy_curve;
  LdcpRange ldcp;
  bool gps = false;
  std::string notes;

  bool entropy_bounded() const { return entropy == EntropyVerdict::kBounded; }
};

struct ReportOptions {
  std::vector<std::int64_t> grid = default_grid();
  double ldcp_threshold = 1.0;
  std::int64_t ldcp_scan = 16384;
  RelPosition gps_n1 = 1;
  RelPosition gps_n2 = 2;
};

// Raised when the convergence and entropy verdicts contradict each other.
class InconsistentVerdicts : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Samples one (q, k) pair on the unit sphere from `seed` and runs every
// verifier on it.
PropertyReport build_property_report(const Encoding& enc, int d, std::uint64_t seed,
                                     const ReportOptions& options = {});

}  // namespace gpelab::lab

#include "gpelab/property_lab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace gpelab::lab {

namespace {

// Neumaier-compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  void scale(double f) {
    sum_ *= f;
    comp_ *= f;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Streaming log(sum exp(a_i)) with a running max shift.
class LogSumExp {
 public:
  void add(double a) {
    if (!std::isfinite(a)) {
      throw std::domain_error("non-finite attention score in normalization sum");
    }
    if (a > max_) {
      if (std::isfinite(max_)) sum_.scale(std::exp(max_ - a));
      max_ = a;
    }
    sum_.add(std::exp(a - max_));
  }
  double log() const { return max_ + std::log(sum_.value()); }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  CompensatedSum sum_;
};

Normalization make_normalization(std::int64_t length, double log_z) {
  Normalization out;
  out.length = length;
  out.log_z = log_z;
  const double z = std::exp(log_z);
  if (std::isfinite(z)) out.z = z;
  return out;
}

std::vector<double> totals(std::span<const double> q, std::span<const double> k,
                           const Encoding& enc, std::int64_t max_len) {
  const ScoreProfile profile = score_profile(q, k, enc, max_len);
  std::vector<double> out;
  out.reserve(profile.size());
  for (const auto& s : profile) out.push_back(s.total);
  return out;
}

void check_grid(std::span<const std::int64_t> grid) {
  if (grid.size() < 5) {
    throw std::invalid_argument("length grid needs at least four doublings (five points)");
  }
  if (grid.front() < 1) throw std::invalid_argument("length grid must start at L >= 1");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (grid[i] != 2 * grid[i - 1]) {
      throw std::invalid_argument("length grid must double at every step");
    }
  }
}

// splitmix64 finalizer over (seed, index); one engine seed per sub-stream.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double entropy_from_log_z(std::span<const double> scores, double log_z) {
  CompensatedSum h;
  for (double a : scores) {
    const double log_p = a - log_z;
    const double p = std::exp(log_p);
    if (p > 0.0) h.add(-p * log_p);
  }
  return std::max(0.0, h.value());
}

}  // namespace

std::vector<std::int64_t> default_grid() {
  std::vector<std::int64_t> grid;
  for (int e = 6; e <= 14; ++e) grid.push_back(std::int64_t{1} << e);
  return grid;
}

std::string to_string(ConvergenceClass c) {
  switch (c) {
    case ConvergenceClass::kConvergent:
      return "Convergent";
    case ConvergenceClass::kDivergent:
      return "Divergent";
    case ConvergenceClass::kUndetermined:
      break;
  }
  return "Undetermined";
}

std::string to_string(EntropyVerdict v) {
  switch (v) {
    case EntropyVerdict::kBounded:
      return "Bounded";
    case EntropyVerdict::kUnbounded:
      return "Unbounded";
    case EntropyVerdict::kUndetermined:
      break;
  }
  return "Undetermined";
}

Normalization partial_normalization(std::span<const double> q, std::span<const double> k,
                                    const Encoding& enc, std::int64_t max_len) {
  if (max_len < 0) throw std::invalid_argument("partial_normalization: L must be >= 0");
  LogSumExp lse;
  for (std::int64_t n = 0; n <= max_len; ++n) lse.add(gpe_score(q, k, n, enc).total);
  return make_normalization(max_len, lse.log());
}

NormalizationCurve normalization_curve(std::span<const double> q, std::span<const double> k,
                                       const Encoding& enc, std::span<const std::int64_t> grid) {
  NormalizationCurve curve;
  if (grid.empty()) return curve;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 0 || (i > 0 && grid[i] <= grid[i - 1])) {
      throw std::invalid_argument("normalization_curve: grid must be increasing and >= 0");
    }
  }
  LogSumExp lse;
  std::size_t next = 0;
  for (std::int64_t n = 0; n <= grid.back(); ++n) {
    lse.add(gpe_score(q, k, n, enc).total);
    if (n == grid[next]) {
      curve.entries.push_back(make_normalization(n, lse.log()));
      ++next;
    }
  }
  return curve;
}

ConvergenceClass classify_convergence(const NormalizationCurve& curve) {
  std::vector<std::int64_t> grid;
  for (const auto& e : curve.entries) grid.push_back(e.length);
  check_grid(grid);
  const auto& entries = curve.entries;
  bool divergent = true;
  bool convergent = true;
  for (std::size_t i = entries.size() - kFinalDoublings; i < entries.size(); ++i) {
    const double log_ratio = entries[i].log_z - entries[i - 1].log_z;
    if (!(std::exp(log_ratio) >= 1.0 + kDivergenceEpsilon)) divergent = false;
    if (!(std::expm1(log_ratio) <= kConvergenceEpsilon)) convergent = false;
  }
  if (divergent) return ConvergenceClass::kDivergent;
  if (convergent) return ConvergenceClass::kConvergent;
  return ConvergenceClass::kUndetermined;
}

ConvergenceClass classify_convergence(std::span<const double> q, std::span<const double> k,
                                      const Encoding& enc, std::span<const std::int64_t> grid) {
  check_grid(grid);
  return classify_convergence(normalization_curve(q, k, enc, grid));
}

double softmax_entropy(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("softmax_entropy: empty score list");
  LogSumExp lse;
  for (double a : scores) lse.add(a);
  return entropy_from_log_z(scores, lse.log());
}

double truncated_entropy(std::span<const double> q, std::span<const double> k,
                         const Encoding& enc, std::int64_t max_len) {
  if (max_len < 0) throw std::invalid_argument("truncated_entropy: L must be >= 0");
  return softmax_entropy(totals(q, k, enc, max_len));
}

EntropyCurve entropy_curve(std::span<const double> q, std::span<const double> k,
                           const Encoding& enc, std::span<const std::int64_t> grid) {
  EntropyCurve curve;
  if (grid.empty()) return curve;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (grid[i] < 0 || (i > 0 && grid[i] <= grid[i - 1])) {
      throw std::invalid_argument("entropy_curve: grid must be increasing and >= 0");
    }
  }
  const std::vector<double> scores = totals(q, k, enc, grid.back());
  for (std::int64_t len : grid) {
    std::span<const double> head(scores.data(), static_cast<std::size_t>(len) + 1);
    curve.entries.push_back({len, softmax_entropy(head)});
  }
  return curve;
}

EntropyVerdict classify_entropy(const EntropyCurve& curve) {
  std::vector<std::int64_t> grid;
  for (const auto& e : curve.entries) grid.push_back(e.length);
  check_grid(grid);
  const auto& entries = curve.entries;
  bool flat = true;
  bool growing = true;
  for (std::size_t i = entries.size() - kFinalDoublings; i < entries.size(); ++i) {
    const double inc = entries[i].entropy - entries[i - 1].entropy;
    if (!(std::abs(inc) < kEntropyFlatEpsilon)) flat = false;
    if (!(inc >= kEntropyGrowthFloor)) growing = false;
  }
  if (flat) return EntropyVerdict::kBounded;
  if (growing) return EntropyVerdict::kUnbounded;
  return EntropyVerdict::kUndetermined;
}

std::vector<double> sample_unit_vector(int d, std::uint64_t seed, std::uint64_t index) {
  if (d < 1) throw std::invalid_argument("sample_unit_vector: d must be >= 1");
  std::mt19937_64 rng(mix_seed(seed, index));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(d));
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (double& x : v) {
      x = normal(rng);
      norm2 += x * x;
    }
  } while (norm2 == 0.0);
  const double inv = 1.0 / std::sqrt(norm2);
  for (double& x : v) x *= inv;
  return v;
}

McMoments mc_score_moments(const Encoding& enc, RelPosition n, int d, std::int64_t samples,
                           std::uint64_t seed, ScoreComponent component) {
  if (samples < 1) throw std::invalid_argument("mc_score_moments: need at least one sample");
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("mc_score_moments: d must be even");
  McMoments out;
  out.n = n;
  out.samples = samples;
  out.seed = seed;
  // Welford's running mean / M2.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::int64_t i = 0; i < samples; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const auto q = sample_unit_vector(d, seed, 2 * idx);
    const auto k = sample_unit_vector(d, seed, 2 * idx + 1);
    const ScoreBreakdown s = gpe_score(q, k, n, enc);
    double x = s.total;
    if (component == ScoreComponent::kMultiplicative) x = s.multiplicative;
    if (component == ScoreComponent::kBias) x = s.bias;
    const double delta = x - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (x - mean);
  }
  out.mean = mean;
  out.variance = samples > 1 ? m2 / static_cast<double>(samples - 1) : 0.0;
  return out;
}

double decay_magnitude(const Encoding& enc, RelPosition n) {
  if (std::holds_alternative<RopeEncoding>(enc)) return 0.0;
  // For every other variant the expected multiplicative part vanishes under
  // unit-sphere sampling, leaving the bias; b(n) doesn't depend on q, k.
  const std::vector<double> zero(2, 0.0);
  Encoding probe = enc;
  if (auto* ape = std::get_if<ApeEncoding>(&probe)) ape->params.alpha.assign(1, 1.0);
  if (auto* custom = std::get_if<CustomGpe>(&probe)) custom->transform = IdentityTransform{};
  return std::abs(gpe_score(zero, zero, n, probe).bias);
}

LdcpRange ldcp_range(const Encoding& enc, double c1, std::int64_t n_max) {
  if (!(c1 > 0.0)) throw std::invalid_argument("ldcp_range: threshold C1 must be > 0");
  if (n_max < 0) throw std::invalid_argument("ldcp_range: n_max must be >= 0");
  LdcpRange out;
  for (std::int64_t n = 0; n <= n_max; ++n) {
    if (decay_magnitude(enc, n) > c1) {
      out.range = n - 1;
      return out;
    }
  }
  out.range = n_max;
  out.unbounded_within_scan = true;
  return out;
}

TailEstimate tail_probability_mc(const Encoding& enc, RelPosition n, double c1, int d,
                                 std::int64_t samples, std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("tail_probability_mc: need at least one sample");
  TailEstimate out;
  out.samples = samples;
  for (std::int64_t i = 0; i < samples; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    const auto q = sample_unit_vector(d, seed, 2 * idx);
    const auto k = sample_unit_vector(d, seed, 2 * idx + 1);
    if (gpe_score(q, k, n, enc).total >= c1) ++out.hits;
  }
  const double total = static_cast<double>(samples);
  const double p = static_cast<double>(out.hits) / total;
  constexpr double z = 1.959963984540054;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / total;
  const double centre = (p + z2 / (2.0 * total)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / total + z2 / (4.0 * total * total)) / denom;
  out.probability = p;
  out.wilson_low = std::max(0.0, centre - half);
  out.wilson_high = std::min(1.0, centre + half);
  return out;
}

std::vector<double> grad_q_analytic(std::span<const double> q, std::span<const double> k,
                                    RelPosition n, const Encoding& enc) {
  return score_grad_q(q, k, n, enc);
}

double grad_check(std::span<const double> q, std::span<const double> k, RelPosition n,
                  const Encoding& enc, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");
  const std::vector<double> analytic = grad_q_analytic(q, k, n, enc);
  double scale = 1e-12;
  for (double g : analytic) scale = std::max(scale, std::abs(g));
  std::vector<double> probe(q.begin(), q.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const ScoreBreakdown plus = gpe_score(probe, k, n, enc);
    probe[i] = saved - h;
    const ScoreBreakdown minus = gpe_score(probe, k, n, enc);
    probe[i] = saved;
    // Differencing each term keeps a large bias from cancelling the signal.
    const double numeric = ((plus.multiplicative - minus.multiplicative) +
                            (plus.bias - minus.bias)) /
                           (2.0 * h);
    worst = std::max(worst, std::abs(numeric - analytic[i]) / scale);
  }
  return worst;
}

bool gps_test(std::span<const double> q, std::span<const double> k, const Encoding& enc,
              RelPosition n1, RelPosition n2) {
  const auto g1 = grad_q_analytic(q, k, n1, enc);
  const auto g2 = grad_q_analytic(q, k, n2, enc);
  double diff2 = 0.0;
  for (std::size_t i = 0; i < g1.size(); ++i) diff2 += (g1[i] - g2[i]) * (g1[i] - g2[i]);
  return std::sqrt(diff2) > 1e-9;
}

PropertyReport build_property_report(const Encoding& enc, int d, std::uint64_t seed,
                                     const ReportOptions& options) {
  validate(enc);
  const auto q = sample_unit_vector(d, seed, 0);
  const auto k = sample_unit_vector(d, seed, 1);
  PropertyReport report;
  report.encoding = encoding_name(enc);
  report.dimension = d;
  report.normalization = normalization_curve(q, k, enc, options.grid);
  report.convergence = classify_convergence(report.normalization);
  report.entropy_curve = entropy_curve(q, k, enc, options.grid);
  report.entropy = classify_entropy(report.entropy_curve);
  report.ldcp = ldcp_range(enc, options.ldcp_threshold, options.ldcp_scan);
  report.gps = gps_test(q, k, enc, options.gps_n1, options.gps_n2);

  const bool conv = report.convergence == ConvergenceClass::kConvergent;
  const bool div = report.convergence == ConvergenceClass::kDivergent;
  const bool bounded = report.entropy == EntropyVerdict::kBounded;
  const bool unbounded = report.entropy == EntropyVerdict::kUnbounded;
  if ((conv && unbounded) || (div && bounded)) {
    throw InconsistentVerdicts("encoding " + report.encoding + ": normalization is " +
                               to_string(report.convergence) + " but entropy is " +
                               to_string(report.entropy));
  }

  std::ostringstream notes;
  if (report.ldcp.unbounded_within_scan) {
    notes << "ldcp range not exceeded within scan of " << options.ldcp_scan << ";";
  }
  if (report.convergence == ConvergenceClass::kUndetermined) {
    notes << "normalization undetermined on grid;";
  }
  if (report.entropy == EntropyVerdict::kUndetermined) notes << "entropy undetermined on grid;";
  report.notes = notes.str();
  return report;
}

}  // namespace gpelab::lab

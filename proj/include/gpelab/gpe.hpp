#pragma once

// Generalized positional encoding: every encoding modifies the raw attention
// score of a (query, key) pair at relative position n as
//
//   A(n) = f(n) * (q^T W(n) k) + b(n)
//
// with a gain f, a position-dependent transform W and an additive bias b.
// All arithmetic in this layer is double precision and follows the raw form
// above (no 1/sqrt(d) scaling).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace gpelab {

using RelPosition = std::int64_t;

struct RopeEncoding {
  double base = 10000.0;
};

struct AlibiEncoding {
  double slope = 0.5;
};

// Parameters of the adaptive encoding. `alpha` holds one positive scale per
// 2-D rotation block; block m rotates by n / alpha[m].
struct ApeParams {
  double lambda = 0.1;
  double delta = 0.5;
  double beta = 0.1;
  double gamma = 0.1;
  std::vector<double> alpha;

  // alpha[m] = base^(2m/d), i.e. the RoPE frequency schedule.
  static std::vector<double> rope_schedule(int d, double base = 10000.0);
};

struct ApeEncoding {
  ApeParams params;
};

// W(n) for a custom encoding: identity, or block rotation with angle
// n * frequencies[m] on block m.
struct IdentityTransform {};
struct RotationTransform {
  std::vector<double> frequencies;
};
using Transform = std::variant<IdentityTransform, RotationTransform>;

struct CustomGpe {
  std::string name = "custom";
  std::function<double(RelPosition)> gain = [](RelPosition) { return 1.0; };
  Transform transform = IdentityTransform{};
  std::function<double(RelPosition)> bias = [](RelPosition) { return 0.0; };
};

using Encoding = std::variant<RopeEncoding, AlibiEncoding, ApeEncoding, CustomGpe>;

// f = 1, W = I, b = 0: the raw dot product.
CustomGpe identity_encoding();

// Builds an APE encoding for head dimension d with alpha on the RoPE schedule.
ApeEncoding make_ape(double lambda, double delta, double beta, double gamma, int d,
                     double base = 10000.0);

// Short label used in reports and CSV output ("rope", "alibi", "ape", custom name).
std::string encoding_name(const Encoding& enc);

// Throws std::invalid_argument if the encoding parameters violate their
// invariants (non-positive base/slope/alpha, negative APE coefficients,
// delta <= 0).
void validate(const Encoding& enc);

struct ScoreBreakdown {
  double multiplicative = 0.0;
  double bias = 0.0;
  double total = 0.0;
};

using ScoreProfile = std::vector<ScoreBreakdown>;

ScoreBreakdown gpe_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                         const Encoding& enc);

// Entries n = 0..max_len, each identical to gpe_score at that n.
ScoreProfile score_profile(std::span<const double> q, std::span<const double> k,
                           const Encoding& enc, RelPosition max_len);

// Exact gradient of the GPE score with respect to q: f(n) * W(n) k.
std::vector<double> score_grad_q(std::span<const double> q, std::span<const double> k,
                                 RelPosition n, const Encoding& enc);

}  // namespace gpelab

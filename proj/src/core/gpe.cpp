#include "gpelab/gpe.hpp"

#include <cmath>
#include <stdexcept>
#include <type_traits>

#include "gpelab/encodings.hpp"

namespace gpelab {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void check_inputs(std::span<const double> q, std::span<const double> k, RelPosition n) {
  if (q.size() != k.size()) {
    throw std::invalid_argument("gpe_score: q has dimension " + std::to_string(q.size()) +
                                ", k has dimension " + std::to_string(k.size()));
  }
  if (q.empty()) throw std::invalid_argument("gpe_score: empty vectors");
  if (n < 0) throw std::invalid_argument("gpe_score: relative position must be >= 0");
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (!std::isfinite(q[i]) || !std::isfinite(k[i])) {
      throw std::invalid_argument("gpe_score: non-finite input vector entry");
    }
  }
}

void require_even(std::size_t d) {
  if (d % 2 != 0) {
    throw std::invalid_argument("rotation encodings need an even dimension, got " +
                                std::to_string(d));
  }
}

// W(n) k for every encoding together with f(n) and b(n).
struct Parts {
  double gain = 1.0;
  std::vector<double> wk;
  double bias = 0.0;
};

Parts parts(std::span<const double> k, RelPosition n, const Encoding& enc) {
  const std::size_t d = k.size();
  return std::visit(
      Overloaded{
          [&](const RopeEncoding& e) {
            require_even(d);
            return Parts{1.0, apply_rotation(k, rope_angles(static_cast<int>(d), e.base, n)),
                         0.0};
          },
          [&](const AlibiEncoding& e) {
            return Parts{1.0, std::vector<double>(k.begin(), k.end()),
                         -e.slope * static_cast<double>(std::llabs(n))};
          },
          [&](const ApeEncoding& e) {
            require_even(d);
            if (e.params.alpha.size() * 2 != d) {
              throw std::invalid_argument("APE alpha has " + std::to_string(e.params.alpha.size()) +
                                          " blocks for dimension " + std::to_string(d));
            }
            return Parts{ape_temp(n, e.params.lambda),
                         apply_rotation(k, scaled_angles(e.params.alpha, n)),
                         ape_bias(n, e.params.delta, e.params.beta, e.params.gamma)};
          },
          [&](const CustomGpe& e) {
            Parts p;
            p.gain = e.gain(n);
            p.bias = e.bias(n);
            if (const auto* rot = std::get_if<RotationTransform>(&e.transform)) {
              require_even(d);
              if (rot->frequencies.size() * 2 != d) {
                throw std::invalid_argument("custom rotation frequency count does not match d");
              }
              std::vector<double> angles(rot->frequencies.size());
              for (std::size_t m = 0; m < angles.size(); ++m) {
                angles[m] = rot->frequencies[m] * static_cast<double>(n);
              }
              p.wk = apply_rotation(k, angles);
            } else {
              p.wk.assign(k.begin(), k.end());
            }
            return p;
          },
      },
      enc);
}

}  // namespace

std::vector<double> ApeParams::rope_schedule(int d, double base) {
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("rope_schedule: d must be even");
  std::vector<double> alpha(static_cast<std::size_t>(d / 2));
  for (int m = 0; m < d / 2; ++m) alpha[m] = std::pow(base, 2.0 * m / d);
  return alpha;
}

CustomGpe identity_encoding() {
  CustomGpe enc;
  enc.name = "identity";
  return enc;
}

ApeEncoding make_ape(double lambda, double delta, double beta, double gamma, int d, double base) {
  ApeEncoding enc;
  enc.params.lambda = lambda;
  enc.params.delta = delta;
  enc.params.beta = beta;
  enc.params.gamma = gamma;
  enc.params.alpha = ApeParams::rope_schedule(d, base);
  return enc;
}

std::string encoding_name(const Encoding& enc) {
  return std::visit(Overloaded{
                        [](const RopeEncoding&) { return std::string("rope"); },
                        [](const AlibiEncoding&) { return std::string("alibi"); },
                        [](const ApeEncoding&) { return std::string("ape"); },
                        [](const CustomGpe& e) { return e.name; },
                    },
                    enc);
}

void validate(const Encoding& enc) {
  std::visit(Overloaded{
                 [](const RopeEncoding& e) {
                   if (!(e.base > 0.0)) throw std::invalid_argument("RoPE base must be positive");
                 },
                 [](const AlibiEncoding& e) {
                   if (!(e.slope > 0.0)) throw std::invalid_argument("ALiBi slope must be positive");
                 },
                 [](const ApeEncoding& e) {
                   const auto& p = e.params;
                   if (!(p.delta > 0.0)) throw std::invalid_argument("APE delta must be > 0");
                   if (!(p.lambda >= 0.0) || !(p.beta >= 0.0) || !(p.gamma >= 0.0)) {
                     throw std::invalid_argument("APE lambda, beta, gamma must be >= 0");
                   }
                   for (double a : p.alpha) {
                     if (!(a > 0.0)) throw std::invalid_argument("APE alpha entries must be > 0");
                   }
                 },
                 [](const CustomGpe& e) {
                   if (!e.gain || !e.bias) throw std::invalid_argument("custom GPE needs f and b");
                 },
             },
             enc);
}

ScoreBreakdown gpe_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                         const Encoding& enc) {
  check_inputs(q, k, n);
  const Parts p = parts(k, n, enc);
  ScoreBreakdown out;
  out.multiplicative = p.gain * dot(q, p.wk);
  out.bias = p.bias;
  out.total = out.multiplicative + out.bias;
  return out;
}

ScoreProfile score_profile(std::span<const double> q, std::span<const double> k,
                           const Encoding& enc, RelPosition max_len) {
  if (max_len < 0) throw std::invalid_argument("score_profile: L must be >= 0");
  ScoreProfile profile;
  profile.reserve(static_cast<std::size_t>(max_len) + 1);
  for (RelPosition n = 0; n <= max_len; ++n) profile.push_back(gpe_score(q, k, n, enc));
  return profile;
}

std::vector<double> score_grad_q(std::span<const double> q, std::span<const double> k,
                                 RelPosition n, const Encoding& enc) {
  check_inputs(q, k, n);
  Parts p = parts(k, n, enc);
  for (double& x : p.wk) x *= p.gain;
  return p.wk;
}

}  // namespace gpelab

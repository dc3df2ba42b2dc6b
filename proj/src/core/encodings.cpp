#include "gpelab/encodings.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gpelab {

namespace {

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::invalid_argument(std::string(what) + " contains a non-finite entry");
    }
  }
}

}  // namespace

std::vector<double> rope_angles(int d, double base, RelPosition n) {
  if (d < 2 || d % 2 != 0) {
    throw std::invalid_argument("rope_angles: dimension must be even and >= 2, got " +
                                std::to_string(d));
  }
  if (!(base > 0.0) || !std::isfinite(base)) {
    throw std::invalid_argument("rope_angles: base must be positive");
  }
  std::vector<double> angles(static_cast<std::size_t>(d / 2));
  for (int m = 0; m < d / 2; ++m) {
    angles[m] = std::pow(base, -2.0 * m / d) * static_cast<double>(n);
  }
  return angles;
}

std::vector<double> scaled_angles(std::span<const double> alpha, RelPosition n) {
  std::vector<double> angles(alpha.size());
  for (std::size_t m = 0; m < alpha.size(); ++m) {
    angles[m] = static_cast<double>(n) / alpha[m];
  }
  return angles;
}

std::vector<double> apply_rotation(std::span<const double> v, std::span<const double> angles) {
  if (v.size() != 2 * angles.size()) {
    throw std::invalid_argument("apply_rotation: vector has dimension " +
                                std::to_string(v.size()) + " but " +
                                std::to_string(angles.size()) + " block angles were given");
  }
  std::vector<double> out(v.size());
  for (std::size_t m = 0; m < angles.size(); ++m) {
    const double c = std::cos(angles[m]);
    const double s = std::sin(angles[m]);
    const double x = v[2 * m];
    const double y = v[2 * m + 1];
    out[2 * m] = x * c - y * s;
    out[2 * m + 1] = x * s + y * c;
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: dimension mismatch (" + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()) + ")");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double rope_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                  double base) {
  if (q.size() != k.size()) {
    throw std::invalid_argument("rope_score: q and k dimensions differ");
  }
  const auto rotated = apply_rotation(k, rope_angles(static_cast<int>(k.size()), base, n));
  return dot(q, rotated);
}

std::vector<double> alibi_slopes(int num_heads) {
  if (num_heads < 1) {
    throw std::invalid_argument("alibi_slopes: need at least one head");
  }
  const double ratio = std::pow(2.0, -4.0 / 3.0);
  std::vector<double> slopes(static_cast<std::size_t>(num_heads));
  slopes[0] = ratio;
  for (int h = 1; h < num_heads; ++h) slopes[h] = slopes[h - 1] * ratio;
  return slopes;
}

double alibi_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                   double slope) {
  return dot(q, k) - slope * static_cast<double>(std::llabs(n));
}

double ape_temp(RelPosition n, double lambda) {
  return 1.0 / (1.0 + lambda * static_cast<double>(std::llabs(n)));
}

double ape_bias(RelPosition n, double delta, double beta, double gamma) {
  const double an = static_cast<double>(std::llabs(n));
  return -delta * an - beta * std::log1p(an) - gamma * std::sqrt(an);
}

ScoreBreakdown ape_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                         const ApeParams& params) {
  if (q.size() != k.size()) {
    throw std::invalid_argument("ape_score: q and k dimensions differ");
  }
  if (k.size() != 2 * params.alpha.size()) {
    throw std::invalid_argument("ape_score: alpha has " + std::to_string(params.alpha.size()) +
                                " blocks but vectors have dimension " + std::to_string(k.size()));
  }
  require_finite(q, "q");
  require_finite(k, "k");
  ScoreBreakdown out;
  const auto rotated = apply_rotation(k, scaled_angles(params.alpha, n));
  out.multiplicative = ape_temp(n, params.lambda) * dot(q, rotated);
  out.bias = ape_bias(n, params.delta, params.beta, params.gamma);
  out.total = out.multiplicative + out.bias;
  return out;
}

}  // namespace gpelab

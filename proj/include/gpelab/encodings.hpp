#pragma once

// Closed-form score components of RoPE, ALiBi and the adaptive encoding (APE).
// Bias and temperature formulas use |n| even though causal decoding only
// produces n >= 0. Logarithms are natural.

#include <span>
#include <vector>

#include "gpelab/gpe.hpp"

namespace gpelab {

// Block angles for RoPE: angles[m] = base^(-2m/d) * n, m = 0..d/2-1.
std::vector<double> rope_angles(int d, double base, RelPosition n);

// Block angles n / alpha[m] for a per-block scale sequence.
std::vector<double> scaled_angles(std::span<const double> alpha, RelPosition n);

// Rotates each consecutive pair (v[2m], v[2m+1]) counter-clockwise by angles[m].
std::vector<double> apply_rotation(std::span<const double> v, std::span<const double> angles);

double dot(std::span<const double> a, std::span<const double> b);

double rope_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                  double base = 10000.0);

// Geometric slopes 2^(-4(h+1)/3), h = 0..num_heads-1.
std::vector<double> alibi_slopes(int num_heads);

double alibi_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                   double slope);

double ape_temp(RelPosition n, double lambda);

double ape_bias(RelPosition n, double delta, double beta, double gamma);

ScoreBreakdown ape_score(std::span<const double> q, std::span<const double> k, RelPosition n,
                         const ApeParams& params);

}  // namespace gpelab

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace fbd {

using Rng = std::mt19937_64;

/// Independent stream seed for (seed, stream), via splitmix64 mixing.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// log of a Gamma(shape, 1) draw; stays finite for shapes well below 1.
double sample_log_gamma(Rng& rng, double shape);

std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> concentration);

struct BetaShape {
  double a = 0.0;
  double b = 0.0;
};

/// Method-of-moments shape parameters. Requires 0 < var < mean(1-mean).
BetaShape beta_shape_from_moments(double mean, double var);

double sample_beta(Rng& rng, BetaShape shape);

double sample_standard_normal(Rng& rng);

}  // namespace fbd

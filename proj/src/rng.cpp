#include "fbdebias/rng.hpp"

#include <algorithm>
#include <cmath>

#include "fbdebias/error.hpp"

namespace fbd {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double sample_log_gamma(Rng& rng, double shape) {
  if (!(shape > 0.0)) fail(ErrorCode::InvalidArgument, "gamma shape must be positive");
  if (shape >= 1.0) {
    std::gamma_distribution<double> g(shape, 1.0);
    return std::log(g(rng));
  }
  // G(a) = G(a+1) * U^(1/a)
  std::gamma_distribution<double> g(shape + 1.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double uu = u(rng);
  while (uu <= 0.0) uu = u(rng);
  return std::log(g(rng)) + std::log(uu) / shape;
}

std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> concentration) {
  std::vector<double> out(concentration.size());
  double max_log = -INFINITY;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = sample_log_gamma(rng, concentration[i]);
    max_log = std::max(max_log, out[i]);
  }
  double total = 0.0;
  for (double& x : out) {
    x = std::exp(x - max_log);
    total += x;
  }
  for (double& x : out) x /= total;
  return out;
}

BetaShape beta_shape_from_moments(double mean, double var) {
  if (!(mean > 0.0 && mean < 1.0)) fail(ErrorCode::InvalidArgument, "beta mean must lie in (0,1)");
  const double limit = mean * (1.0 - mean);
  if (!(var > 0.0 && var < limit)) fail(ErrorCode::InvalidArgument, "beta variance infeasible for mean");
  const double common = limit / var - 1.0;
  return {mean * common, (1.0 - mean) * common};
}

double sample_beta(Rng& rng, BetaShape shape) {
  const double la = sample_log_gamma(rng, shape.a);
  const double lb = sample_log_gamma(rng, shape.b);
  // a / (a + b) computed from logs
  const double m = std::max(la, lb);
  const double ea = std::exp(la - m);
  const double eb = std::exp(lb - m);
  return ea / (ea + eb);
}

double sample_standard_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

}  // namespace fbd
